//! Resonance sequences, resonance time sets H_t, finite block clouds, the
//! level function T and the power-selection search.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cloud::CloudIndex;
use crate::cocycle::{cocycle_stats, orbit, CocycleStats, OrbitSegment};
use crate::error::{Error, Result};
use crate::systems::{DiscreteMap, Splitting, TorusPoint, E, F};

pub const DEFAULT_WINDOW: usize = 500;
pub const DEFAULT_LEVELS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
/// Slack used when comparing log a against log t.
pub const LEVEL_SLACK: f64 = 1e-12;

/// Reference exponents chi_E^- (expanding bundle) and chi_F^+ (contracting).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub chi_e: f64,
    pub chi_f: f64,
}

impl Exponents {
    pub fn from_stats(stats: &CocycleStats) -> Self {
        let (chi_e, chi_f) = stats.mean_exponents();
        Exponents { chi_e, chi_f }
    }

    pub fn scaled(&self, n: usize) -> Self {
        Exponents {
            chi_e: self.chi_e * n as f64,
            chi_f: self.chi_f * n as f64,
        }
    }
}

/// eps0 = min over the sorted spectrum of |chi_i|/10 and |chi_{i+1} - chi_i|/10.
pub fn eps0(chis: &[f64]) -> f64 {
    let mut sorted = chis.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut e = f64::INFINITY;
    for (i, c) in sorted.iter().enumerate() {
        e = e.min(c.abs() / 10.0);
        if i + 1 < sorted.len() {
            e = e.min((sorted[i] - sorted[i + 1]).abs() / 10.0);
        }
    }
    e
}

/// Default epsilon: half of eps0.
pub fn default_epsilon(exps: &Exponents) -> f64 {
    eps0(&[exps.chi_e, exps.chi_f]) / 2.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResonanceProfile {
    pub epsilon: f64,
    pub exponents: Exponents,
    pub window: usize,
    /// a2 is a sup over at most `window` steps, not over all j >= 0.
    pub windowed: bool,
    pub base: TorusPoint,
    pub steps: usize,
    /// log a1_n for n = 0..=steps, and its per-bundle parts.
    pub a1: Vec<f64>,
    pub a1_f: Vec<f64>,
    pub a1_e: Vec<f64>,
    /// log a2_n for n = 0..=steps - window, and its per-bundle parts.
    pub a2: Vec<f64>,
    pub a2_f: Vec<f64>,
    pub a2_e: Vec<f64>,
    /// True where the windowed sup is attained only at j = window.
    pub a2_saturated: Vec<bool>,
    /// Per-step log ratios log r_F,i and log r_E,i.
    pub log_rf: Vec<f64>,
    pub log_re: Vec<f64>,
    pub log_c0: f64,
}

impl ResonanceProfile {
    /// Number of indices n where both sequences are defined.
    pub fn len(&self) -> usize {
        self.a2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a2.is_empty()
    }

    /// log max(a1_n, a2_n).
    pub fn log_level(&self, n: usize) -> f64 {
        self.a1[n].max(self.a2[n])
    }
}

pub(crate) fn forward_recurrence(log_r: &[f64]) -> Vec<f64> {
    let mut a = Vec::with_capacity(log_r.len() + 1);
    a.push(0.0);
    for (i, r) in log_r.iter().enumerate() {
        a.push((a[i] + r).max(0.0));
    }
    a
}

/// max over i in [n, n + w] of p[i], for n = 0..=p.len() - 1 - w.
fn sliding_max(p: &[f64], w: usize) -> Vec<f64> {
    let count = p.len() - w;
    let mut out = Vec::with_capacity(count);
    let mut dq: VecDeque<usize> = VecDeque::new();
    for i in 0..p.len() {
        while let Some(&b) = dq.back() {
            if p[b] <= p[i] {
                dq.pop_back();
            } else {
                break;
            }
        }
        dq.push_back(i);
        if i >= w {
            let n = i - w;
            while let Some(&f) = dq.front() {
                if f < n {
                    dq.pop_front();
                } else {
                    break;
                }
            }
            out.push(p[*dq.front().expect("nonempty")]);
        }
    }
    out
}

/// log of the windowed sup over 0 <= j <= w of the product over [n, n+j-1],
/// plus the saturation flag (sup attained only at j = w).
pub(crate) fn windowed_backward(log_r: &[f64], w: usize) -> (Vec<f64>, Vec<bool>) {
    let mut p = Vec::with_capacity(log_r.len() + 1);
    p.push(0.0);
    for r in log_r {
        p.push(p[p.len() - 1] + r);
    }
    let m = sliding_max(&p, w);
    let sat = if w == 0 {
        vec![false; m.len()]
    } else {
        let m_short = sliding_max(&p[..p.len() - 1], w - 1);
        (0..m.len()).map(|n| p[n + w] > m_short[n]).collect()
    };
    let vals = (0..m.len()).map(|n| m[n] - p[n]).collect();
    (vals, sat)
}

/// Resonance sequences from per-step cocycle data. The sup of the two
/// bundles is taken after each bundle runs its own exact recurrence.
pub fn resonance_from_stats(
    stats: &CocycleStats,
    exps: &Exponents,
    epsilon: f64,
    window: usize,
    base: TorusPoint,
) -> Result<ResonanceProfile> {
    if epsilon <= 0.0 {
        return Err(Error::Precondition("epsilon must be positive".into()));
    }
    let steps = stats.steps();
    if window > steps {
        return Err(Error::WindowTooLong { window, len: steps });
    }
    let log_rf: Vec<f64> = stats.log_norm[F]
        .iter()
        .map(|l| l - (exps.chi_f + epsilon))
        .collect();
    let log_re: Vec<f64> = stats.log_conorm[E]
        .iter()
        .map(|l| (exps.chi_e - epsilon) - l)
        .collect();
    let a1_f = forward_recurrence(&log_rf);
    let a1_e = forward_recurrence(&log_re);
    let a1 = a1_f.iter().zip(&a1_e).map(|(a, b)| a.max(*b)).collect();
    let (a2_f, sat_f) = windowed_backward(&log_rf, window);
    let (a2_e, sat_e) = windowed_backward(&log_re, window);
    let a2: Vec<f64> = a2_f.iter().zip(&a2_e).map(|(a, b)| a.max(*b)).collect();
    let a2_saturated = (0..a2.len())
        .map(|n| (sat_f[n] && a2_f[n] >= a2_e[n]) || (sat_e[n] && a2_e[n] >= a2_f[n]))
        .collect();
    let log_c0 = log_rf
        .iter()
        .chain(&log_re)
        .map(|r| r.abs())
        .fold(0.0, f64::max);
    Ok(ResonanceProfile {
        epsilon,
        exponents: *exps,
        window,
        windowed: true,
        base,
        steps,
        a1,
        a1_f,
        a1_e,
        a2,
        a2_f,
        a2_e,
        a2_saturated,
        log_rf,
        log_re,
        log_c0,
    })
}

pub fn resonance_sequences(
    seg: &OrbitSegment,
    s: &dyn Splitting,
    exps: &Exponents,
    epsilon: f64,
    window: usize,
) -> Result<ResonanceProfile> {
    let stats = cocycle_stats(seg, s)?;
    resonance_from_stats(&stats, exps, epsilon, window, seg.base())
}

/// a2 at window W against W/2 on the common index range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowSensitivity {
    pub window: usize,
    pub half_window: usize,
    pub max_log_a2_change: f64,
    /// (t, number of indices whose H_t membership differs).
    pub membership_changes: Vec<(f64, usize)>,
    pub saturated_fraction: f64,
}

pub fn window_sensitivity(
    stats: &CocycleStats,
    exps: &Exponents,
    epsilon: f64,
    window: usize,
    levels: &[f64],
    base: TorusPoint,
) -> Result<WindowSensitivity> {
    let full = resonance_from_stats(stats, exps, epsilon, window, base)?;
    let half = resonance_from_stats(stats, exps, epsilon, window / 2, base)?;
    let n = full.len();
    let max_change = (0..n)
        .map(|i| full.a2[i] - half.a2[i])
        .fold(0.0, f64::max);
    let membership_changes = levels
        .iter()
        .map(|&t| {
            let lt = t.ln() + LEVEL_SLACK;
            let c = (0..n)
                .filter(|&i| (full.log_level(i) <= lt) != (half.log_level(i) <= lt))
                .count();
            (t, c)
        })
        .collect();
    let saturated_fraction =
        full.a2_saturated.iter().filter(|s| **s).count() as f64 / n.max(1) as f64;
    Ok(WindowSensitivity {
        window,
        half_window: window / 2,
        max_log_a2_change: max_change,
        membership_changes,
        saturated_fraction,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResonanceTimeSet {
    pub t: f64,
    pub times: Vec<usize>,
    /// Density over the full computed range.
    pub density: f64,
    /// min / max of prefix densities over prefixes of length >= len/2.
    pub lower: f64,
    pub upper: f64,
    /// Membership is computed from windowed a2 values.
    pub window_approximate: bool,
    pub range: usize,
}

impl ResonanceTimeSet {
    pub fn contains(&self, n: usize) -> bool {
        self.times.binary_search(&n).is_ok()
    }
}

pub fn resonance_times(profile: &ResonanceProfile, t: f64) -> Result<ResonanceTimeSet> {
    if t < 1.0 {
        return Err(Error::Precondition(format!("level t = {t} below 1")));
    }
    let lt = t.ln() + LEVEL_SLACK;
    let len = profile.len();
    let times: Vec<usize> = (0..len).filter(|&n| profile.log_level(n) <= lt).collect();
    let mut lower = f64::INFINITY;
    let mut upper: f64 = 0.0;
    let mut count = 0usize;
    let mut it = times.iter().peekable();
    for k in 1..=len {
        while it.peek().is_some_and(|&&n| n < k) {
            it.next();
            count += 1;
        }
        if k >= len / 2 {
            let d = count as f64 / k as f64;
            lower = lower.min(d);
            upper = upper.max(d);
        }
    }
    let density = if len == 0 { 0.0 } else { times.len() as f64 / len as f64 };
    Ok(ResonanceTimeSet {
        t,
        times,
        density,
        lower: if lower.is_finite() { lower } else { 0.0 },
        upper,
        window_approximate: profile.windowed,
        range: len,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockApproximation {
    pub t: f64,
    pub tail_start: usize,
    pub indices: Vec<usize>,
    pub points: Vec<TorusPoint>,
    /// Largest distance from an orbit-tail point to the cloud.
    pub mesh: f64,
}

const COVER_SAMPLES: usize = 20_000;

pub fn block_points(
    seg: &OrbitSegment,
    times: &ResonanceTimeSet,
    tail_start: usize,
) -> Result<BlockApproximation> {
    if tail_start >= seg.points.len() {
        return Err(Error::Precondition(format!(
            "tail_start {tail_start} beyond orbit length {}",
            seg.len()
        )));
    }
    let indices: Vec<usize> = times
        .times
        .iter()
        .copied()
        .filter(|&n| n >= tail_start)
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyTail {
            t: times.t,
            tail_start,
        });
    }
    let points: Vec<TorusPoint> = indices.iter().map(|&n| seg.points[n]).collect();
    let index = CloudIndex::new(points.clone());
    let end = times.range.min(seg.points.len());
    let stride = ((end.saturating_sub(tail_start)) / COVER_SAMPLES).max(1);
    let mesh = index.covering_radius((tail_start..end).step_by(stride).map(|k| &seg.points[k]));
    Ok(BlockApproximation {
        t: times.t,
        tail_start,
        indices,
        points,
        mesh,
    })
}

/// Block clouds at every level of a grid, for level queries.
pub struct LevelIndex {
    pub levels: Vec<f64>,
    clouds: Vec<Option<CloudIndex>>,
    sets: Vec<ResonanceTimeSet>,
}

impl LevelIndex {
    pub fn new(
        profile: &ResonanceProfile,
        seg: &OrbitSegment,
        levels: &[f64],
        tail_start: usize,
    ) -> Result<Self> {
        let mut sorted = levels.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut clouds = Vec::new();
        let mut sets = Vec::new();
        for &t in &sorted {
            let h = resonance_times(profile, t)?;
            let pts: Vec<TorusPoint> = h
                .times
                .iter()
                .filter(|&&n| n >= tail_start)
                .map(|&n| seg.points[n])
                .collect();
            clouds.push(if pts.is_empty() { None } else { Some(CloudIndex::new(pts)) });
            sets.push(h);
        }
        Ok(LevelIndex {
            levels: sorted,
            clouds,
            sets,
        })
    }

    /// Smallest level whose cloud has a point within `mesh` of `x`.
    pub fn level_of(&self, x: &TorusPoint, mesh: f64) -> Option<f64> {
        for (t, c) in self.levels.iter().zip(&self.clouds) {
            if let Some(c) = c {
                if let Some((_, d)) = c.nearest(x) {
                    if d <= mesh {
                        return Some(*t);
                    }
                }
            }
        }
        None
    }

    /// Level of an orbit index by direct membership (mesh 0 along the orbit).
    pub fn level_of_index(&self, n: usize) -> Option<f64> {
        self.levels
            .iter()
            .zip(&self.sets)
            .find(|(_, h)| h.contains(n))
            .map(|(t, _)| *t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelFunction {
    pub levels: Vec<f64>,
    pub mesh: f64,
    /// (orbit index, T estimate).
    pub values: Vec<(usize, f64)>,
    pub method: String,
}

/// T at the given orbit indices: the minimal grid level whose block cloud has
/// a point within `mesh` of the orbit point.
pub fn level_estimates(
    index: &LevelIndex,
    seg: &OrbitSegment,
    queries: &[usize],
    mesh: f64,
) -> Result<LevelFunction> {
    let mut values = Vec::with_capacity(queries.len());
    for &k in queries {
        let t = if mesh == 0.0 {
            index.level_of_index(k)
        } else {
            index.level_of(&seg.points[k], mesh)
        };
        match t {
            Some(t) => values.push((k, t)),
            None => return Err(Error::NotCovered { index: k }),
        }
    }
    Ok(LevelFunction {
        levels: index.levels.clone(),
        mesh,
        values,
        method: "min level whose H_t contains a time within mesh of the point".into(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemperedAudit {
    pub n: usize,
    /// (k, (1/k) log T(g^k x0)).
    pub series: Vec<(usize, f64)>,
    pub max_late: f64,
    pub max_mid: f64,
    /// max over [n/2, n] <= max over [n/4, n/2].
    pub decay_pass: bool,
    /// |max over k >= n/2| <= 2 |max over k >= n/4|.
    pub loose_pass: bool,
    pub bound: Option<f64>,
    pub bound_pass: Option<bool>,
}

pub fn tempered_audit(level_fn: &LevelFunction, n: usize, bound: Option<f64>) -> TemperedAudit {
    let series: Vec<(usize, f64)> = level_fn
        .values
        .iter()
        .filter(|(k, _)| *k >= 1 && *k <= n)
        .map(|(k, t)| (*k, t.ln() / *k as f64))
        .collect();
    let max_in = |lo: usize, hi: usize| {
        series
            .iter()
            .filter(|(k, _)| *k >= lo && *k <= hi)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    };
    let max_late = max_in(n / 2, n);
    let max_mid = max_in(n / 4, n / 2);
    let tail_quarter = max_in(n / 4, n);
    TemperedAudit {
        n,
        decay_pass: max_late <= max_mid,
        loose_pass: max_late.abs() <= 2.0 * tail_quarter.abs(),
        bound_pass: bound.map(|b| max_late <= b),
        series,
        max_late,
        max_mid,
        bound,
    }
}

/// Orbit-level driver: orbit of length n + window, exponents from the same
/// orbit, direct-membership level function at k = 1..=n. The level grid is
/// extended by doubling until every index is covered.
pub fn tempered_audit_orbit(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x0: &TorusPoint,
    n: usize,
    epsilon: f64,
    window: usize,
    levels: &[f64],
) -> Result<(TemperedAudit, LevelFunction)> {
    let seg = orbit(map, x0, n + window)?;
    let stats = cocycle_stats(&seg, s)?;
    let exps = Exponents::from_stats(&stats);
    let profile = resonance_from_stats(&stats, &exps, epsilon, window, *x0)?;
    let mut grid = levels.to_vec();
    let max_level = (1..=n).map(|k| profile.log_level(k)).fold(0.0, f64::max);
    while grid.iter().cloned().fold(1.0, f64::max).ln() + LEVEL_SLACK < max_level {
        let top = grid.iter().cloned().fold(1.0, f64::max);
        grid.push(top * 2.0);
    }
    let index = LevelIndex::new(&profile, &seg, &grid, 0)?;
    let queries: Vec<usize> = (1..=n).collect();
    let lf = level_estimates(&index, &seg, &queries, 0.0)?;
    Ok((tempered_audit(&lf, n, None), lf))
}

/// Log residuals of the four product bounds at block index n over k steps,
/// ordered [E backward, E forward, F backward, F forward]; each must be >= 0.
pub fn block_bound_check(
    stats: &CocycleStats,
    exps: &Exponents,
    epsilon: f64,
    t: f64,
    indices: &[usize],
    k: usize,
) -> Result<Vec<[f64; 4]>> {
    let lt = t.ln();
    let kf = k as f64;
    indices
        .iter()
        .map(|&n| {
            if n < k || n + k > stats.steps() {
                return Err(Error::InsufficientWindow {
                    lo: n as i64 - k as i64,
                    hi: (n + k) as i64,
                    len: stats.steps(),
                });
            }
            let (_, e_back) = stats.restricted_norms(E, n - k, k)?;
            let (_, e_fwd) = stats.restricted_norms(E, n, k)?;
            let (f_back, _) = stats.restricted_norms(F, n - k, k)?;
            let (f_fwd, _) = stats.restricted_norms(F, n, k)?;
            let e_bound = (exps.chi_e - epsilon) * kf - lt;
            let f_bound = lt + (exps.chi_f + epsilon) * kf;
            Ok([e_back - e_bound, e_fwd - e_bound, f_bound - f_back, f_bound - f_fwd])
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerSelection {
    pub n: usize,
    pub density: f64,
    pub densities: Vec<(usize, f64)>,
    /// Densities nondecreasing along the candidate list (audit, not a theorem).
    pub nondecreasing: bool,
}

/// Smallest candidate N whose H_1 density for g = f^N (epsilon scaled to
/// N epsilon, window in g-steps W/N) reaches theta.
#[allow(clippy::too_many_arguments)]
pub fn select_power(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x0: &TorusPoint,
    epsilon: f64,
    theta: f64,
    candidates: &[usize],
    steps: usize,
    window: usize,
) -> Result<PowerSelection> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::Precondition(format!("theta = {theta} outside [0, 1)")));
    }
    let seg = orbit(map, x0, steps)?;
    let stats = cocycle_stats(&seg, s)?;
    let exps = Exponents::from_stats(&stats);
    let mut densities = Vec::new();
    for &n in candidates {
        if n == 0 {
            return Err(Error::Precondition("power N must be positive".into()));
        }
        let g = stats.power(n);
        let w = (window / n).max(1);
        let prof = resonance_from_stats(&g, &exps.scaled(n), epsilon * n as f64, w, *x0)?;
        let h = resonance_times(&prof, 1.0)?;
        densities.push((n, h.density));
    }
    let nondecreasing = densities.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12);
    let chosen = densities.iter().find(|(_, d)| *d >= theta && (*d > theta || theta == 0.0));
    match chosen {
        Some(&(n, density)) => Ok(PowerSelection {
            n,
            density,
            densities,
            nondecreasing,
        }),
        None => Err(Error::NoPower { theta }),
    }
}

/// CSV rows (n, log a1, log a2, membership flags per level).
pub fn write_profile_csv<W: Write>(
    profile: &ResonanceProfile,
    levels: &[f64],
    mut w: W,
) -> std::io::Result<()> {
    write!(w, "n,log_a1,log_a2")?;
    for t in levels {
        write!(w, ",in_H_{t}")?;
    }
    writeln!(w)?;
    for n in 0..profile.len() {
        write!(w, "{},{:e},{:e}", n, profile.a1[n], profile.a2[n])?;
        for t in levels {
            let member = profile.log_level(n) <= t.ln() + LEVEL_SLACK;
            write!(w, ",{}", member as u8)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{ConstantSplitting, TorusMap};
    use proptest::prelude::*;

    fn cat_profile(n: usize, eps: f64, w: usize) -> (OrbitSegment, ResonanceProfile) {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let seg = orbit(&m, &TorusPoint::new(0.31, 0.47), n).unwrap();
        let stats = cocycle_stats(&seg, &s).unwrap();
        let exps = Exponents::from_stats(&stats);
        let p = resonance_from_stats(&stats, &exps, eps, w, seg.base()).unwrap();
        (seg, p)
    }

    fn perturbed_stats(n: usize) -> (OrbitSegment, CocycleStats) {
        let m = TorusMap::perturbed_cat(0.1).unwrap();
        // constant eigenframes are not invariant here; fine for algebraic identities
        let s = ConstantSplitting::cat();
        let seg = orbit(&m, &TorusPoint::new(0.3, 0.7), n).unwrap();
        let st = cocycle_stats(&seg, &s).unwrap();
        (seg, st)
    }

    #[test]
    fn cat_sequences_are_identically_one() {
        let (_, p) = cat_profile(5000, 0.03, 100);
        assert!(p.a1.iter().all(|&a| a == 0.0));
        assert!(p.a2.iter().all(|&a| a == 0.0));
        let h = resonance_times(&p, 1.0).unwrap();
        assert_eq!(h.density, 1.0);
        assert_eq!(h.times.len(), p.len());
    }

    #[test]
    fn empty_product_convention() {
        let (_, st) = perturbed_stats(300);
        let exps = Exponents::from_stats(&st);
        let p = resonance_from_stats(&st, &exps, 0.05, 50, TorusPoint::new(0.0, 0.0)).unwrap();
        assert_eq!(p.a1[0], 0.0);
        assert!(p.a1.iter().chain(&p.a2).all(|&a| a >= 0.0));
        assert!(matches!(
            resonance_from_stats(&st, &exps, 0.05, 301, TorusPoint::new(0.0, 0.0)),
            Err(Error::WindowTooLong { .. })
        ));
    }

    #[test]
    fn window_zero_gives_trivial_a2() {
        let (_, st) = perturbed_stats(300);
        let exps = Exponents::from_stats(&st);
        let p = resonance_from_stats(&st, &exps, 0.05, 0, TorusPoint::new(0.0, 0.0)).unwrap();
        assert!(p.a2.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn per_bundle_recurrences_and_growth_bound() {
        let (_, st) = perturbed_stats(3000);
        let exps = Exponents::from_stats(&st);
        let p = resonance_from_stats(&st, &exps, 0.02, 100, TorusPoint::new(0.0, 0.0)).unwrap();
        for n in 0..p.steps {
            let ef = (p.a1_f[n] + p.log_rf[n]).max(0.0);
            assert!((p.a1_f[n + 1] - ef).abs() < 1e-10);
            let ee = (p.a1_e[n] + p.log_re[n]).max(0.0);
            assert!((p.a1_e[n + 1] - ee).abs() < 1e-10);
            assert!(p.a1[n + 1] <= p.log_c0 + p.a1[n] + 1e-10);
        }
        for n in 0..p.len() - 1 {
            if !p.a2_saturated[n + 1] {
                assert!(p.a2[n + 1] <= p.log_c0 + p.a2[n] + 1e-10);
            }
        }
    }

    #[test]
    fn level_sets_nest_and_large_t_covers_all() {
        let (seg, st) = perturbed_stats(4000);
        let exps = Exponents::from_stats(&st);
        let p = resonance_from_stats(&st, &exps, 0.02, 100, seg.base()).unwrap();
        let h2 = resonance_times(&p, 2.0).unwrap();
        let h5 = resonance_times(&p, 5.0).unwrap();
        assert!(h2.times.iter().all(|n| h5.contains(*n)));
        let top = (0..p.len()).map(|n| p.log_level(n)).fold(0.0, f64::max).exp() * 1.01;
        assert_eq!(resonance_times(&p, top).unwrap().times.len(), p.len());
        assert!(resonance_times(&p, 0.5).is_err());
    }

    #[test]
    fn cat_fixed_point_block_and_levels() {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let seg = orbit(&m, &TorusPoint::new(0.0, 0.0), 300).unwrap();
        let stats = cocycle_stats(&seg, &s).unwrap();
        let p = resonance_from_stats(&stats, &Exponents::from_stats(&stats), 0.05, 50, seg.base()).unwrap();
        let h = resonance_times(&p, 1.0).unwrap();
        let b = block_points(&seg, &h, 10).unwrap();
        assert!(b.points.iter().all(|q| *q == TorusPoint::new(0.0, 0.0)));
        assert_eq!(b.mesh, 0.0);
        let idx = LevelIndex::new(&p, &seg, &DEFAULT_LEVELS, 0).unwrap();
        let lf = level_estimates(&idx, &seg, &[1, 5, 100], 0.01).unwrap();
        assert!(lf.values.iter().all(|(_, t)| *t == 1.0));
    }

    #[test]
    fn empty_tail_is_reported() {
        let (seg, st) = perturbed_stats(2000);
        let exps = Exponents::from_stats(&st);
        let p = resonance_from_stats(&st, &exps, 0.001, 100, seg.base()).unwrap();
        let mut h = resonance_times(&p, 1.0).unwrap();
        h.times.clear();
        assert!(matches!(block_points(&seg, &h, 0), Err(Error::EmptyTail { .. })));
    }

    #[test]
    fn block_bound_check_closed_form_on_cat() {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let seg = orbit(&m, &TorusPoint::new(0.2, 0.9), 400).unwrap();
        let st = cocycle_stats(&seg, &s).unwrap();
        let exps = Exponents::from_stats(&st);
        let eps = 0.04;
        let r = block_bound_check(&st, &exps, eps, 1.0, &[150], 37).unwrap();
        for v in r[0] {
            assert!((v - eps * 37.0).abs() < 1e-9);
        }
        let r0 = block_bound_check(&st, &exps, eps, 3.0, &[150], 0).unwrap();
        for v in r0[0] {
            assert!((v - 3f64.ln()).abs() < 1e-15);
        }
        assert!(block_bound_check(&st, &exps, eps, 1.0, &[10], 37).is_err());
    }

    #[test]
    fn cat_select_power_is_one() {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let x = TorusPoint::new(0.11, 0.73);
        let sel = select_power(&m, &s, &x, 0.05, 0.9, &[1, 2, 4], 4000, 200).unwrap();
        assert_eq!(sel.n, 1);
        assert_eq!(sel.density, 1.0);
        let sel0 = select_power(&m, &s, &x, 0.05, 0.0, &[2, 4], 4000, 200).unwrap();
        assert_eq!(sel0.n, 2);
    }

    #[test]
    fn tempered_series_vanishes_on_cat() {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let (audit, _) =
            tempered_audit_orbit(&m, &s, &TorusPoint::new(0.3, 0.3), 2000, 0.05, 100, &DEFAULT_LEVELS)
                .unwrap();
        assert!(audit.series.iter().all(|(_, v)| *v == 0.0));
        assert!(audit.decay_pass);
    }

    #[test]
    fn eps0_rule() {
        assert!((eps0(&[0.96, -0.96]) - 0.096).abs() < 1e-15);
        assert!((eps0(&[1.0, 0.2, -1.0]) - 0.02).abs() < 1e-15);
    }

    fn brute_a1(lr: &[f64], n: usize) -> f64 {
        let mut best: f64 = 0.0;
        for j in 0..=n {
            best = best.max(lr[n - j..n].iter().sum::<f64>());
        }
        best
    }

    fn brute_a2(lr: &[f64], n: usize, w: usize) -> f64 {
        let mut best: f64 = 0.0;
        for j in 0..=w {
            best = best.max(lr[n..n + j].iter().sum::<f64>());
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn recurrence_matches_brute_force(n in 0usize..1500, eps in 0.005f64..0.1) {
            let (_, st) = perturbed_stats(2000);
            let exps = Exponents::from_stats(&st);
            let p = resonance_from_stats(&st, &exps, eps, 200, TorusPoint::new(0.0, 0.0)).unwrap();
            let a1 = brute_a1(&p.log_rf, n).max(brute_a1(&p.log_re, n));
            let a2 = brute_a2(&p.log_rf, n, 200).max(brute_a2(&p.log_re, n, 200));
            prop_assert!((p.a1[n] - a1).abs() < 1e-10);
            prop_assert!((p.a2[n] - a2).abs() < 1e-10);
        }

        #[test]
        fn densities_monotone_in_t(t1 in 1.0f64..10.0, dt in 0.0f64..10.0) {
            let (_, st) = perturbed_stats(3000);
            let exps = Exponents::from_stats(&st);
            let p = resonance_from_stats(&st, &exps, 0.02, 100, TorusPoint::new(0.0, 0.0)).unwrap();
            let a = resonance_times(&p, t1).unwrap();
            let b = resonance_times(&p, t1 + dt).unwrap();
            prop_assert!(a.density <= b.density);
            prop_assert!(a.times.iter().all(|n| b.contains(*n)));
        }
    }
}

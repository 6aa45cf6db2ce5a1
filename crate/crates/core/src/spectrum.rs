//! Resonance sequences over every bundle of the splitting, the two-sided
//! product bounds at block points, and approximation of the Lyapunov
//! spectrum by closed periodic orbits.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::blocks::{eps0, forward_recurrence, windowed_backward, Exponents, ResonanceProfile};
use crate::cocycle::{lyapunov_estimate, step_log_factor, CocycleStats};
use crate::error::{Error, Result};
use crate::horseshoe::{restricted_logs, HorseshoeModel};
use crate::manifolds::chart_radius;
use crate::shadowing::{close_periodic, floquet_logs, PeriodicCertificate, PseudoOrbit, ShadowConstants};
use crate::systems::{DiscreteMap, Reversed, Splitting, Swapped, TorusPoint, E, F};

/// Per-bundle, per-side resonance sequences (log domain). Side 0 bounds the
/// norm from above by e^{(chi_j + eps) k}, side 1 the co-norm from below by
/// e^{(chi_j - eps) k}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiResonanceProfile {
    pub chis: Vec<f64>,
    pub epsilon: f64,
    pub power: usize,
    pub window: usize,
    /// [bundle][side] -> log a1_n
    pub a1_parts: Vec<[Vec<f64>; 2]>,
    /// [bundle][side] -> log a2_n
    pub a2_parts: Vec<[Vec<f64>; 2]>,
    /// combined sequences in the layout used by module blocks
    pub profile: ResonanceProfile,
}

/// Resonance sequences of g = f^N from its per-step cocycle data (`stats`
/// already aggregated over N steps), with per-bundle exponents of f.
pub fn multi_resonance(
    stats: &CocycleStats,
    chis: &[f64],
    epsilon: f64,
    power: usize,
    window: usize,
    base: TorusPoint,
) -> Result<MultiResonanceProfile> {
    let e0 = eps0(chis);
    if !(epsilon > 0.0) || epsilon >= e0 {
        return Err(Error::EpsilonTooLarge { epsilon, eps0: e0 });
    }
    if chis.len() != stats.bundles() {
        return Err(Error::Precondition(format!(
            "{} exponents for {} bundles",
            chis.len(),
            stats.bundles()
        )));
    }
    let steps = stats.steps();
    if window > steps {
        return Err(Error::WindowTooLong { window, len: steps });
    }
    let n = power.max(1) as f64;
    let mut a1_parts = Vec::new();
    let mut a2_parts = Vec::new();
    let mut sat_parts = Vec::new();
    let mut ratios = Vec::new();
    for (j, chi) in chis.iter().enumerate() {
        let upper: Vec<f64> = stats.log_norm[j].iter().map(|l| l - (chi + epsilon) * n).collect();
        let lower: Vec<f64> = stats.log_conorm[j].iter().map(|l| (chi - epsilon) * n - l).collect();
        let (u2, su) = windowed_backward(&upper, window);
        let (l2, sl) = windowed_backward(&lower, window);
        a1_parts.push([forward_recurrence(&upper), forward_recurrence(&lower)]);
        a2_parts.push([u2, l2]);
        sat_parts.push([su, sl]);
        ratios.push([upper, lower]);
    }
    let combine = |parts: &[[Vec<f64>; 2]], j: usize| -> Vec<f64> {
        parts[j][0].iter().zip(&parts[j][1]).map(|(a, b)| a.max(*b)).collect()
    };
    let a1_e = combine(&a1_parts, E);
    let a1_f = combine(&a1_parts, F);
    let a2_e = combine(&a2_parts, E);
    let a2_f = combine(&a2_parts, F);
    let a1 = a1_e.iter().zip(&a1_f).map(|(a, b)| a.max(*b)).collect();
    let a2: Vec<f64> = a2_e.iter().zip(&a2_f).map(|(a, b)| a.max(*b)).collect();
    let a2_saturated = (0..a2.len())
        .map(|i| {
            (0..chis.len()).any(|j| (0..2).any(|side| sat_parts[j][side][i] && a2_parts[j][side][i] >= a2[i]))
        })
        .collect();
    let log_c0 = ratios
        .iter()
        .flat_map(|r| r.iter().flat_map(|v| v.iter()))
        .map(|r| r.abs())
        .fold(0.0, f64::max);
    let profile = ResonanceProfile {
        epsilon: epsilon * n,
        exponents: Exponents {
            chi_e: chis[E] * n,
            chi_f: chis[F] * n,
        },
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
        log_rf: ratios[F][0].clone(),
        log_re: ratios[E][1].clone(),
        log_c0,
    };
    Ok(MultiResonanceProfile {
        chis: chis.to_vec(),
        epsilon,
        power: power.max(1),
        window,
        a1_parts,
        a2_parts,
        profile,
    })
}

/// Log residuals of the two-sided product bounds at block index n over k
/// steps of g, per bundle, ordered [backward lower, backward upper, forward
/// lower, forward upper]; each should be >= 0.
pub fn liaopesin_check(
    stats: &CocycleStats,
    chis: &[f64],
    epsilon: f64,
    power: usize,
    t: f64,
    n: usize,
    k: usize,
) -> Result<Vec<[f64; 4]>> {
    if n < k || n + k > stats.steps() {
        return Err(Error::InsufficientWindow {
            lo: n as i64 - k as i64,
            hi: (n + k) as i64,
            len: stats.steps(),
        });
    }
    let lt = t.ln();
    let kn = (k * power.max(1)) as f64;
    chis.iter()
        .enumerate()
        .map(|(j, chi)| {
            let (bn, bc) = stats.restricted_norms(j, n - k, k)?;
            let (fnm, fc) = stats.restricted_norms(j, n, k)?;
            let lower = (chi - epsilon) * kn - lt;
            let upper = lt + (chi + epsilon) * kn;
            Ok([bc - lower, upper - bn, fc - lower, upper - fnm])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// recurrence search

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Recurrence {
    /// orbit index of x
    pub index: usize,
    pub point: TorusPoint,
    pub n: usize,
    pub gap: f64,
    /// log max(a1, a2) at x and at f^n x
    pub levels: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecurrenceSearch {
    pub t: f64,
    pub epsilon: f64,
    pub gap_bound: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub window: usize,
    pub budget: usize,
}

/// Per-step log factors on each bundle at x, in interpolated frames.
fn step_logs(map: &dyn DiscreteMap, s: &dyn Splitting, x: &TorusPoint) -> Result<[f64; 2]> {
    let y = map.forward(x);
    let from = [s.frame(E, x), s.frame(F, x)];
    let to = [s.frame(E, &y), s.frame(F, &y)];
    let jac = map.derivative(x);
    Ok([
        step_log_factor(&jac, &from, &to, E, x)?,
        step_log_factor(&jac, &from, &to, F, x)?,
    ])
}

/// log a2 at x: sup over 0 <= k <= window of the forward ratios, all bundles and sides.
fn forward_level(map: &dyn DiscreteMap, s: &dyn Splitting, x: &TorusPoint, chis: &[f64], eps: f64, window: usize) -> Result<f64> {
    let mut sums = [[0.0f64; 2]; 2];
    let mut best: f64 = 0.0;
    let mut p = *x;
    for _ in 0..window {
        let l = step_logs(map, s, &p)?;
        for j in 0..2 {
            sums[j][0] += l[j] - (chis[j] + eps);
            sums[j][1] += (chis[j] - eps) - l[j];
            best = best.max(sums[j][0]).max(sums[j][1]);
        }
        p = map.forward(&p);
    }
    Ok(best)
}

/// Streams the orbit of x0 and returns the first pair (x_i, x_{i+n}), with
/// n_min <= n <= n_max and gap below the bound, whose ends both lie in H_t.
/// a1 is carried along the stream; a2 is evaluated over the window at the
/// two ends of each candidate.
pub fn find_recurrence(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x0: &TorusPoint,
    chis: &[f64],
    search: &RecurrenceSearch,
) -> Result<Recurrence> {
    let RecurrenceSearch {
        t,
        epsilon,
        gap_bound,
        n_min,
        n_max,
        window,
        budget,
    } = *search;
    if !(gap_bound > 0.0) || n_min == 0 || n_max < n_min {
        return Err(Error::Precondition("invalid recurrence search parameters".into()));
    }
    let lt = t.ln() + crate::blocks::LEVEL_SLACK;
    let key = |p: &TorusPoint| {
        (
            (p.coords[0] / gap_bound).floor() as i64,
            (p.coords[1] / gap_bound).floor() as i64,
        )
    };
    let cells = (1.0 / gap_bound).floor() as i64 + 1;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    // recent points with their log a1
    let mut recent: VecDeque<(TorusPoint, f64)> = VecDeque::with_capacity(n_max + 3);
    let mut a1 = [[0.0f64; 2]; 2];
    let mut p = *x0;
    for i in 0..budget {
        let level1 = a1.iter().flat_map(|a| a.iter()).fold(0.0f64, |m, v| m.max(*v));
        recent.push_back((p, level1));
        if recent.len() > n_max + 2 {
            recent.pop_front();
        }
        let base = i + 1 - recent.len();
        // index i - n_min becomes eligible, i - n_max - 1 leaves
        if i >= n_min {
            let j = i - n_min;
            let (q, l) = recent[j - base];
            if l <= lt {
                grid.entry(key(&q)).or_default().push(j);
            }
        }
        if i > n_max {
            let j = i - n_max - 1;
            let q = recent[j - base].0;
            if let Some(v) = grid.get_mut(&key(&q)) {
                v.retain(|&k| k != j);
                if v.is_empty() {
                    grid.remove(&key(&q));
                }
            }
        }
        if level1 <= lt {
            let (ci, cj) = key(&p);
            let mut found: Option<(usize, f64)> = None;
            for di in -1..=1 {
                for dj in -1..=1 {
                    let c = ((ci + di).rem_euclid(cells), (cj + dj).rem_euclid(cells));
                    for &k in grid.get(&c).into_iter().flatten() {
                        let d = recent[k - base].0.distance(&p);
                        if d < gap_bound && found.is_none_or(|(_, g)| d < g) {
                            found = Some((k, d));
                        }
                    }
                }
            }
            if let Some((k, gap)) = found {
                let x = recent[k - base].0;
                let l_start = forward_level(map, s, &x, chis, epsilon, window)?.max(recent[k - base].1);
                let l_end = forward_level(map, s, &p, chis, epsilon, window)?.max(level1);
                if l_start <= lt && l_end <= lt {
                    return Ok(Recurrence {
                        index: k,
                        point: x,
                        n: i - k,
                        gap,
                        levels: [l_start, l_end],
                    });
                }
            }
        }
        let l = step_logs(map, s, &p)?;
        for j in 0..2 {
            a1[j][0] = (a1[j][0] + l[j] - (chis[j] + epsilon)).max(0.0);
            a1[j][1] = (a1[j][1] + (chis[j] - epsilon) - l[j]).max(0.0);
        }
        p = map.forward(&p);
    }
    Err(Error::Precondition(format!(
        "no admissible recurrence with gap < {gap_bound:e} and n in [{n_min}, {n_max}] within {budget} steps"
    )))
}

// ---------------------------------------------------------------------------
// spectrum comparison

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumMatch {
    /// exponents of mu with multiplicities, descending
    pub mu_exponents: Vec<f64>,
    pub periodic_exponents: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub max_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// largest difference between forward and backward (inverse map) Floquet logs
    pub backward_consistency: f64,
}

/// Sorted exponents of mu and of the periodic orbit through `orbit`, each
/// bundle repeated by its dimension, and their largest difference.
pub fn spectrum_match(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    mu_chis: &[f64],
    orbit: &[TorusPoint],
    tolerance: f64,
) -> Result<SpectrumMatch> {
    if orbit.is_empty() {
        return Err(Error::Precondition("empty periodic orbit".into()));
    }
    let n = orbit.len() as f64;
    let fwd = floquet_logs(map, s, orbit)?;
    let mut rev = vec![orbit[0]];
    rev.extend(orbit[1..].iter().rev());
    let inv = Reversed(map);
    let sw = Swapped(s);
    let bwd = floquet_logs(&inv, &sw, &rev)?;
    let backward_consistency = (fwd[E] + bwd[F]).abs().max((fwd[F] + bwd[E]).abs());
    let dims = s.dims();
    let mut pairs: Vec<(f64, f64, usize)> = (0..dims.len())
        .map(|j| (mu_chis[j], fwd[j] / n, dims[j]))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut mu_exponents = Vec::new();
    let mut periodic_exponents = Vec::new();
    for &(m, p, d) in &pairs {
        for _ in 0..d {
            mu_exponents.push(m);
            periodic_exponents.push(p);
        }
    }
    periodic_exponents.sort_by(|a, b| b.total_cmp(a));
    let max_gap = mu_exponents
        .iter()
        .zip(&periodic_exponents)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SpectrumMatch {
        mu_exponents,
        periodic_exponents,
        multiplicities: pairs.iter().map(|p| p.2).collect(),
        max_gap,
        tolerance,
        pass: max_gap < tolerance,
        backward_consistency,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub epsilon: f64,
    pub t: f64,
    pub power: usize,
    pub lyapunov_steps: usize,
    pub window: usize,
    pub n_max: usize,
    pub budget: usize,
    pub samples: usize,
    pub seed: u64,
    pub polish_tol: f64,
}

impl SpectrumConfig {
    pub fn new(epsilon: f64) -> Self {
        SpectrumConfig {
            epsilon,
            t: 2.0,
            power: 1,
            lyapunov_steps: 200_000,
            window: 500,
            n_max: 400,
            budget: 40_000_000,
            samples: 16,
            seed: 1,
            polish_tol: 1e-14,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub chis: Vec<f64>,
    pub oscillation: Vec<f64>,
    pub eps0: f64,
    /// the splitting is defined on the whole torus, so B(supp mu, eps0/2) lies in its domain
    pub domain: String,
    pub beta0: f64,
    pub c1: f64,
    pub n2: usize,
    pub r0: f64,
    pub gap_bound: f64,
    pub recurrence: Recurrence,
    pub certificate: PeriodicCertificate,
    pub matched: SpectrumMatch,
}

/// Estimates the exponents of mu along the orbit of x0, finds a recurrence
/// of a block point with gap below min(beta0, r0/C1), closes it and compares
/// the periodic exponents with those of mu.
pub fn approximate_spectrum_by_periodic(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x0: &TorusPoint,
    cfg: &SpectrumConfig,
) -> Result<SpectrumReport> {
    if cfg.power != 1 {
        return Err(Error::Precondition("only N = 1 is supported for periodic approximation".into()));
    }
    let lyap = lyapunov_estimate(map, s, x0, cfg.lyapunov_steps)?;
    let chis: Vec<f64> = lyap.bundles.iter().map(|b| 0.5 * (b.chi_minus + b.chi_plus)).collect();
    let oscillation: Vec<f64> = lyap.bundles.iter().map(|b| b.oscillation).collect();
    for (c, o) in chis.iter().zip(&oscillation) {
        if c.abs() <= 10.0 * o {
            return Err(Error::Precondition(format!(
                "exponent {c} not separated from 0 by 10x its oscillation {o}"
            )));
        }
    }
    let e0 = eps0(&chis);
    if cfg.epsilon >= e0 {
        return Err(Error::EpsilonTooLarge {
            epsilon: cfg.epsilon,
            eps0: e0,
        });
    }
    let exps = Exponents {
        chi_e: chis[E],
        chi_f: chis[F],
    };
    let consts = ShadowConstants::measure(map, s, cfg.t, cfg.epsilon, exps, cfg.samples, cfg.seed)?;
    // the one-step ratio condition at scale r0 is checked at eps/4, inside the eps N required
    let r0 = chart_radius(map, s, cfg.epsilon, cfg.samples);
    let gap_bound = consts.beta0.min(r0 / consts.c1);
    let n_min = (consts.n2 + 1).max((cfg.t.ln() / cfg.epsilon).floor() as usize + 1);
    let search = RecurrenceSearch {
        t: cfg.t,
        epsilon: cfg.epsilon,
        gap_bound,
        n_min,
        n_max: cfg.n_max.max(n_min),
        window: cfg.window,
        budget: cfg.budget,
    };
    let recurrence = find_recurrence(map, s, &lyap_start(map, x0, cfg.lyapunov_steps), &chis, &search)?;
    let po = PseudoOrbit::periodic_chain(recurrence.point, recurrence.n, 1, recurrence.gap, cfg.t)?;
    let certificate = close_periodic(map, s, &po, Some(&consts), cfg.polish_tol)?;
    let matched = spectrum_match(map, s, &chis, &certificate.orbit, 3.0 * cfg.epsilon)?;
    Ok(SpectrumReport {
        chis,
        oscillation,
        eps0: e0,
        domain: "torus".into(),
        beta0: consts.beta0,
        c1: consts.c1,
        n2: consts.n2,
        r0,
        gap_bound,
        recurrence,
        certificate,
        matched,
    })
}

/// The search continues the orbit where the exponent estimate stopped.
fn lyap_start(map: &dyn DiscreteMap, x0: &TorusPoint, steps: usize) -> TorusPoint {
    (0..steps).fold(*x0, |p, _| map.forward(&p))
}

// ---------------------------------------------------------------------------
// horseshoe audit over all bundles

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleBounds {
    pub point: TorusPoint,
    /// per bundle: [log norm, log co-norm] of Df^m
    pub logs: Vec<[f64; 2]>,
    /// per bundle: [co-norm - (chi_j - eps) m, (chi_j + eps) m - norm]
    pub margins: Vec<[f64; 2]>,
    pub pass: bool,
}

pub fn horseshoe_spectrum_audit(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    model: &HorseshoeModel,
    chis: &[f64],
    epsilon: f64,
) -> Result<Vec<BundleBounds>> {
    let m = model.m as f64;
    model
        .alphabet
        .iter()
        .map(|x| {
            let l = restricted_logs(map, s, x, model.m)?;
            // line bundles: norm and co-norm coincide
            let logs: Vec<[f64; 2]> = l.iter().map(|v| [*v, *v]).collect();
            let margins: Vec<[f64; 2]> = logs
                .iter()
                .zip(chis)
                .map(|(lg, chi)| [lg[1] - (chi - epsilon) * m, (chi + epsilon) * m - lg[0]])
                .collect();
            let pass = margins.iter().all(|mg| mg[0] >= -1e-10 && mg[1] >= -1e-10);
            Ok(BundleBounds {
                point: *x,
                logs,
                margins,
                pass,
            })
        })
        .collect()
}

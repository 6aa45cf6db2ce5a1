//! Horseshoes from recurrent, dynamically separated points: d_n balls,
//! the Ω_{t,n} filter, maximal separated sets, symbol selection, coding of
//! symbol words by shadowing, and the audits of the resulting set.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::CloudIndex;
use crate::cocycle::step_log_factor;
use crate::error::{Error, Result};
use crate::shadowing::{newton_offsets, periodic_newton, shadow_newton, NewtonConfig, PseudoOrbit};
use crate::systems::{DiscreteMap, Mat2, Splitting, TorusPoint, Vec2, E, F};

/// d_n(x, y) = max over 0 <= k < n of d(f^k x, f^k y).
pub fn dn_distance(map: &dyn DiscreteMap, x: &TorusPoint, y: &TorusPoint, n: usize) -> f64 {
    let (mut a, mut b) = (*x, *y);
    let mut m: f64 = 0.0;
    for k in 0..n.max(1) {
        m = m.max(a.distance(&b));
        if k + 1 < n {
            a = map.forward(&a);
            b = map.forward(&b);
        }
    }
    m
}

/// First n points of the orbits of a list of points, stored flat.
pub struct OrbitTable {
    pub n: usize,
    pts: Vec<TorusPoint>,
}

impl OrbitTable {
    pub fn new(map: &dyn DiscreteMap, points: &[TorusPoint], n: usize) -> Self {
        let n = n.max(1);
        let pts: Vec<TorusPoint> = points
            .par_iter()
            .flat_map_iter(|x| {
                let mut out = Vec::with_capacity(n);
                let mut p = *x;
                for _ in 0..n {
                    out.push(p);
                    p = map.forward(&p);
                }
                out
            })
            .collect();
        OrbitTable { n, pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn orbit(&self, i: usize) -> &[TorusPoint] {
        &self.pts[i * self.n..(i + 1) * self.n]
    }

    pub fn dn(&self, i: usize, j: usize) -> f64 {
        self.orbit(i)
            .iter()
            .zip(self.orbit(j))
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max)
    }

    /// d_n between stored orbit i and a given orbit.
    pub fn dn_to(&self, i: usize, orbit: &[TorusPoint]) -> f64 {
        self.orbit(i)
            .iter()
            .zip(orbit)
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max)
    }
}

/// d_n balls of radius rho around a set of centers.
pub struct DynamicalBallIndex {
    pub n: usize,
    pub rho: f64,
    pub centers: Vec<TorusPoint>,
    table: OrbitTable,
}

impl DynamicalBallIndex {
    pub fn new(map: &dyn DiscreteMap, centers: Vec<TorusPoint>, n: usize, rho: f64) -> Self {
        let table = OrbitTable::new(map, &centers, n);
        DynamicalBallIndex { n, rho, centers, table }
    }

    /// Index of the first center whose ball B_n(center, rho) contains x.
    pub fn containing(&self, map: &dyn DiscreteMap, x: &TorusPoint) -> Option<usize> {
        let orbit = OrbitTable::new(map, std::slice::from_ref(x), self.n);
        (0..self.centers.len()).find(|&i| self.table.dn_to(i, orbit.orbit(0)) < self.rho)
    }

    /// Fraction of `sample` covered by the balls.
    pub fn coverage(&self, map: &dyn DiscreteMap, sample: &[TorusPoint]) -> f64 {
        if sample.is_empty() {
            return 0.0;
        }
        let hit = sample.iter().filter(|x| self.containing(map, x).is_some()).count();
        hit as f64 / sample.len() as f64
    }
}

// ---------------------------------------------------------------------------
// test functions and the distance D

/// Real trigonometric characters cos(2π k·x), sin(2π k·x) over nonzero
/// frequencies k in a half-plane, ordered by |k| and then lexicographically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CharacterFamily {
    pub freqs: Vec<([i32; 2], bool)>,
}

pub const DEFAULT_J: usize = 20;

impl CharacterFamily {
    pub fn new(j: usize) -> Self {
        let mut ks: Vec<[i32; 2]> = Vec::new();
        let mut r = 1;
        while 2 * ks.len() < j {
            ks.clear();
            for a in -r..=r {
                for b in -r..=r {
                    if (a > 0 || (a == 0 && b > 0)) && a * a + b * b <= r * r {
                        ks.push([a, b]);
                    }
                }
            }
            r += 1;
        }
        ks.sort_by_key(|k| (k[0] * k[0] + k[1] * k[1], k[0], k[1]));
        let freqs = ks
            .into_iter()
            .flat_map(|k| [(k, false), (k, true)])
            .take(j)
            .collect();
        CharacterFamily { freqs }
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn eval(&self, j: usize, x: &TorusPoint) -> f64 {
        let (k, sin) = self.freqs[j];
        let a = std::f64::consts::TAU * (k[0] as f64 * x.coords[0] + k[1] as f64 * x.coords[1]);
        if sin {
            a.sin()
        } else {
            a.cos()
        }
    }

    pub fn averages(&self, points: &[TorusPoint]) -> Vec<f64> {
        let n = points.len().max(1) as f64;
        (0..self.len())
            .map(|j| points.iter().map(|p| self.eval(j, p)).sum::<f64>() / n)
            .collect()
    }

    /// Lebesgue integrals: all characters have nonzero frequency.
    pub fn lebesgue(&self) -> Vec<f64> {
        vec![0.0; self.len()]
    }

    /// Largest Lipschitz constant among the characters.
    pub fn lipschitz(&self) -> f64 {
        self.freqs
            .iter()
            .map(|(k, _)| std::f64::consts::TAU * ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureDistance {
    pub j: usize,
    /// truncated sum over the first J test functions
    pub value: f64,
    /// value plus the tail bound 2^{1-J}
    pub bound: f64,
}

pub fn measure_distance(a: &[f64], b: &[f64]) -> MeasureDistance {
    let j = a.len().min(b.len());
    let value: f64 = (0..j).map(|i| (a[i] - b[i]).abs() / 2f64.powi(i as i32 + 1)).sum();
    MeasureDistance {
        j,
        value,
        bound: value + 2f64.powi(1 - j as i32),
    }
}

/// Empirical invariant measure: one long orbit after burn-in, with a
/// subsample standing in for the support.
pub struct EmpiricalMeasure {
    pub integrals: Vec<f64>,
    pub support: Vec<TorusPoint>,
    pub steps: usize,
    index: CloudIndex,
}

impl EmpiricalMeasure {
    pub fn from_orbit(
        map: &dyn DiscreteMap,
        x0: &TorusPoint,
        steps: usize,
        burn_in: usize,
        family: &CharacterFamily,
        support_size: usize,
    ) -> Result<Self> {
        if steps == 0 || support_size == 0 {
            return Err(Error::Precondition("empty empirical measure".into()));
        }
        let mut p = (0..burn_in).fold(*x0, |q, _| map.forward(&q));
        let mut sums = vec![0.0; family.len()];
        let stride = (steps / support_size).max(1);
        let mut support = Vec::with_capacity(support_size);
        for i in 0..steps {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += family.eval(j, &p);
            }
            if i % stride == 0 && support.len() < support_size {
                support.push(p);
            }
            p = map.forward(&p);
        }
        let integrals = sums.iter().map(|s| s / steps as f64).collect();
        Ok(Self::from_parts(integrals, support, steps))
    }

    pub fn from_parts(integrals: Vec<f64>, support: Vec<TorusPoint>, steps: usize) -> Self {
        let index = CloudIndex::new(support.clone());
        EmpiricalMeasure {
            integrals,
            support,
            steps,
            index,
        }
    }

    pub fn support_index(&self) -> &CloudIndex {
        &self.index
    }
}

/// Hausdorff distance between two point clouds on the torus.
pub fn hausdorff(a: &[TorusPoint], b: &[TorusPoint]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let ia = CloudIndex::new(a.to_vec());
    let ib = CloudIndex::new(b.to_vec());
    ib.covering_radius(a).max(ia.covering_radius(b))
}

// ---------------------------------------------------------------------------
// partition and the Ω_{t,n} filter

/// Square grid whose cells have diameter at most rho.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridPartition {
    pub per_side: usize,
    pub side: f64,
}

impl GridPartition {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Precondition("partition mesh must be positive".into()));
        }
        let per_side = (std::f64::consts::SQRT_2 / rho).ceil().max(1.0) as usize;
        Ok(GridPartition {
            per_side,
            side: 1.0 / per_side as f64,
        })
    }

    pub fn diameter(&self) -> f64 {
        self.side * std::f64::consts::SQRT_2
    }

    pub fn len(&self) -> usize {
        self.per_side * self.per_side
    }

    pub fn is_empty(&self) -> bool {
        self.per_side == 0
    }

    pub fn cell(&self, x: &TorusPoint) -> usize {
        let i = ((x.coords[0] * self.per_side as f64) as usize).min(self.per_side - 1);
        let j = ((x.coords[1] * self.per_side as f64) as usize).min(self.per_side - 1);
        i * self.per_side + j
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OmegaTests {
    pub recurrence: bool,
    pub density: bool,
    pub birkhoff: bool,
    /// Birkhoff averages are tested for n <= m <= horizon
    pub birkhoff_horizon: usize,
}

impl OmegaTests {
    pub fn all(n: usize) -> Self {
        OmegaTests {
            recurrence: true,
            density: true,
            birkhoff: true,
            birkhoff_horizon: 10 * n,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmegaCandidate {
    pub point: TorusPoint,
    pub cell: usize,
    /// all k in [n, (1+eps)n] with f^k(x) in the cell of x
    pub returns: Vec<usize>,
    /// covering radius of supp(mu) by {f^k x : 1 <= k <= n}, when evaluated
    pub density_radius: Option<f64>,
    /// largest Birkhoff deviation over the tested m and test functions, when evaluated
    pub birkhoff_dev: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmegaReport {
    pub accepted: Vec<OmegaCandidate>,
    pub tested: usize,
    pub fail_recurrence: usize,
    pub fail_density: usize,
    pub fail_birkhoff: usize,
    pub dominant: String,
    /// pass fractions per test; disabled tests are evaluated on a prefix only
    pub pass_rates: [f64; 3],
}

const DENSITY_SAMPLE: usize = 2000;
/// candidates on which disabled tests are still evaluated for the report
const DIAGNOSTIC_PREFIX: usize = 2000;

/// Recurrence, density and Birkhoff tests of Ω_{t,n}. Disabled tests do not
/// reject and are only evaluated on the first candidates, for the report.
#[allow(clippy::too_many_arguments)]
pub fn omega_filter(
    map: &dyn DiscreteMap,
    candidates: &[TorusPoint],
    n: usize,
    epsilon: f64,
    partition: &GridPartition,
    family: &CharacterFamily,
    mu: &EmpiricalMeasure,
    tests: &OmegaTests,
) -> Result<OmegaReport> {
    if n == 0 {
        return Err(Error::Precondition("n must be positive".into()));
    }
    let k_hi = ((1.0 + epsilon) * n as f64).floor() as usize;
    let horizon = tests.birkhoff_horizon.max(n);
    let stride = (mu.support.len() / DENSITY_SAMPLE).max(1);
    let probe: Vec<TorusPoint> = mu.support.iter().step_by(stride).copied().collect();
    let evals: Vec<OmegaCandidate> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let do_den = tests.density || i < DIAGNOSTIC_PREFIX;
            let do_bir = tests.birkhoff || i < DIAGNOSTIC_PREFIX;
            let cell = partition.cell(x);
            let mut returns = Vec::new();
            let mut orbit = Vec::with_capacity(n);
            let mut sums = vec![0.0; family.len()];
            let mut dev: f64 = 0.0;
            let mut p = *x;
            let last = if do_bir { horizon.max(k_hi) } else { k_hi };
            for k in 0..=last {
                if k >= n && k <= k_hi && partition.cell(&p) == cell {
                    returns.push(k);
                }
                if do_den && (1..=n).contains(&k) {
                    orbit.push(p);
                }
                if do_bir && k < horizon {
                    for (j, s) in sums.iter_mut().enumerate() {
                        *s += family.eval(j, &p);
                    }
                    let m = k + 1;
                    if m >= n {
                        for (j, s) in sums.iter().enumerate() {
                            dev = dev.max((s / m as f64 - mu.integrals[j]).abs());
                        }
                    }
                }
                p = map.forward(&p);
            }
            OmegaCandidate {
                point: *x,
                cell,
                returns,
                density_radius: do_den.then(|| CloudIndex::new(orbit).covering_radius(&probe)),
                birkhoff_dev: do_bir.then_some(dev),
            }
        })
        .collect();
    let rec = |c: &OmegaCandidate| !c.returns.is_empty();
    let den = |c: &OmegaCandidate| c.density_radius.is_some_and(|r| r <= 0.5 * epsilon);
    let bir = |c: &OmegaCandidate| c.birkhoff_dev.is_some_and(|d| d <= 0.25 * epsilon);
    let total = evals.len();
    let count = |f: &dyn Fn(&OmegaCandidate) -> bool| evals.iter().filter(|c| f(c)).count();
    let rate = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    let n_den = evals.iter().filter(|c| c.density_radius.is_some()).count();
    let n_bir = evals.iter().filter(|c| c.birkhoff_dev.is_some()).count();
    let pass_rates = [
        rate(count(&rec), total),
        rate(count(&den), n_den),
        rate(count(&bir), n_bir),
    ];
    let fail_recurrence = if tests.recurrence { total - count(&rec) } else { 0 };
    let fail_density = if tests.density { total - count(&den) } else { 0 };
    let fail_birkhoff = if tests.birkhoff { total - count(&bir) } else { 0 };
    let dominant = [
        ("recurrence", fail_recurrence),
        ("density", fail_density),
        ("birkhoff", fail_birkhoff),
    ]
    .iter()
    .max_by_key(|(_, c)| *c)
    .map(|(s, _)| s.to_string())
    .unwrap_or_default();
    let accepted: Vec<OmegaCandidate> = evals
        .into_iter()
        .filter(|c| (!tests.recurrence || rec(c)) && (!tests.density || den(c)) && (!tests.birkhoff || bir(c)))
        .collect();
    if accepted.is_empty() {
        return Err(Error::Precondition(format!(
            "Ω filter rejected all {total} candidates (dominant test: {dominant})"
        )));
    }
    Ok(OmegaReport {
        accepted,
        tested: total,
        fail_recurrence,
        fail_density,
        fail_birkhoff,
        dominant,
        pass_rates,
    })
}

// ---------------------------------------------------------------------------
// separated sets and symbols

/// Greedy maximal subset, in input order, with pairwise d_n >= delta.
pub fn separated_set(map: &dyn DiscreteMap, points: &[TorusPoint], n: usize, delta: f64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    if delta <= 0.0 {
        return (0..points.len()).collect();
    }
    let table = OrbitTable::new(map, points, n);
    // d_n >= d, so only points within delta at time 0 can conflict
    let per_side = ((1.0 / delta).floor() as i64).clamp(1, 4096);
    let cell = |p: &TorusPoint| {
        (
            ((p.coords[0] * per_side as f64) as i64).min(per_side - 1),
            ((p.coords[1] * per_side as f64) as i64).min(per_side - 1),
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut chosen = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (ci, cj) = cell(p);
        let mut ok = true;
        'scan: for di in -1..=1 {
            for dj in -1..=1 {
                let key = ((ci + di).rem_euclid(per_side), (cj + dj).rem_euclid(per_side));
                if let Some(list) = grid.get(&key) {
                    for &k in list {
                        if table.dn(i, k) < delta {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if per_side < 3 {
            ok = chosen.iter().all(|&k| table.dn(i, k) >= delta);
        }
        if ok {
            grid.entry((ci, cj)).or_default().push(i);
            chosen.push(i);
        }
    }
    chosen
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymbolSelection {
    pub m: usize,
    pub cell: usize,
    /// indices into the separated set
    pub selected: Vec<usize>,
    /// #F_k for each tested k
    pub counts_by_k: Vec<(usize, usize)>,
    /// e^{(h - 3eps) n} and e^{(h + 3eps) n}
    pub bracket: (f64, f64),
    pub in_bracket: bool,
    pub trimmed: bool,
}

/// m maximising #F_k, then the cell P maximising #(F_m ∩ P), trimmed to the
/// upper bracket (and to `cap`).
pub fn select_symbols(
    returns: &[Vec<usize>],
    cells: &[usize],
    n: usize,
    epsilon: f64,
    h: f64,
    cap: usize,
) -> Result<SymbolSelection> {
    let k_hi = ((1.0 + epsilon) * n as f64).floor() as usize;
    let counts_by_k: Vec<(usize, usize)> = (n..=k_hi)
        .map(|k| (k, returns.iter().filter(|r| r.contains(&k)).count()))
        .collect();
    let &(m, best) = counts_by_k
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::Precondition("empty return window".into()))?;
    if best == 0 {
        return Err(Error::Precondition("no recurrences recorded".into()));
    }
    let mut by_cell: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, r) in returns.iter().enumerate() {
        if r.contains(&m) {
            by_cell.entry(cells[i]).or_default().push(i);
        }
    }
    let (cell, mut selected) = by_cell
        .into_iter()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .unwrap();
    selected.sort_unstable();
    let bracket = (((h - 3.0 * epsilon) * n as f64).exp(), ((h + 3.0 * epsilon) * n as f64).exp());
    let limit = (bracket.1.floor() as usize).max(1).min(cap.max(1));
    let trimmed = selected.len() > limit;
    selected.truncate(limit);
    let c = selected.len() as f64;
    Ok(SymbolSelection {
        m,
        cell,
        selected,
        counts_by_k,
        bracket,
        in_bracket: c >= bracket.0 && c <= bracket.1,
        trimmed,
    })
}

// ---------------------------------------------------------------------------
// coding

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodedPoint {
    pub word: Vec<usize>,
    pub z: TorusPoint,
    /// the orbit of z over the word (L m points)
    pub orbit: Vec<TorusPoint>,
    pub periodic: bool,
    pub residual: f64,
}

/// Anchors f^j(x_{w_i}) for 0 <= j < m, concatenated over the word.
fn word_anchors(map: &dyn DiscreteMap, alphabet: &[TorusPoint], m: usize, word: &[usize]) -> Vec<TorusPoint> {
    let mut out = Vec::with_capacity(word.len() * m);
    for &w in word {
        let mut p = alphabet[w];
        for _ in 0..m {
            out.push(p);
            p = map.forward(&p);
        }
    }
    out
}

/// The shadowing point of the pseudo-orbit {(x_{w_i}, m)}: a periodic point
/// of period L m for periodic words, the free-boundary shadow otherwise.
pub fn code_word(
    map: &dyn DiscreteMap,
    alphabet: &[TorusPoint],
    m: usize,
    word: &[usize],
    periodic: bool,
) -> Result<CodedPoint> {
    if word.is_empty() || m == 0 {
        return Err(Error::Precondition("empty word or zero return time".into()));
    }
    if let Some(&w) = word.iter().find(|&&w| w >= alphabet.len()) {
        return Err(Error::Precondition(format!("symbol {w} outside the alphabet")));
    }
    if periodic {
        let anchors = word_anchors(map, alphabet, m, word);
        let (delta, _, residual) = periodic_newton(map, &anchors, 1e-15, 100)?;
        let orbit: Vec<TorusPoint> = anchors.iter().zip(&delta).map(|(a, d)| a.offset(*d)).collect();
        return Ok(CodedPoint {
            word: word.to_vec(),
            z: orbit[0],
            orbit,
            periodic,
            residual,
        });
    }
    let mut points: Vec<TorusPoint> = word.iter().map(|&w| alphabet[w]).collect();
    let last = (0..m).fold(*points.last().unwrap(), |p, _| map.forward(&p));
    points.push(last);
    let po = PseudoOrbit::new(0, points, vec![m; word.len() + 1], f64::NAN, 1.0, false)?;
    let exp = po.expand(map);
    let (delta, _) = newton_offsets(map, &exp, &NewtonConfig::default())?;
    let orbit: Vec<TorusPoint> = exp.anchors[..word.len() * m]
        .iter()
        .zip(&delta)
        .map(|(a, d)| a.offset(*d))
        .collect();
    let residual = orbit
        .windows(2)
        .map(|w| w[1].distance(&map.forward(&w[0])))
        .fold(0.0, f64::max);
    Ok(CodedPoint {
        word: word.to_vec(),
        z: orbit[0],
        orbit,
        periodic,
        residual,
    })
}

/// For two codings of equal length: the largest d_m distance between the
/// coded orbits over the blocks where the words differ (0 if none differ).
pub fn injectivity_witness(a: &CodedPoint, b: &CodedPoint, m: usize) -> f64 {
    let mut best: f64 = 0.0;
    for (i, (wa, wb)) in a.word.iter().zip(&b.word).enumerate() {
        if wa == wb {
            continue;
        }
        let d = (0..m)
            .map(|j| a.orbit[i * m + j].distance(&b.orbit[i * m + j]))
            .fold(0.0, f64::max);
        best = best.max(d);
    }
    best
}

// ---------------------------------------------------------------------------
// the pipeline

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorseshoeConfig {
    pub n: usize,
    pub epsilon: f64,
    /// shadowing constant and jump bound used for the partition mesh and separation
    pub c_hat: f64,
    pub beta_hat: f64,
    /// Katok counting scale; infinite when not used
    pub rho1: f64,
    /// partition mesh override
    pub rho: Option<f64>,
    pub j: usize,
    pub candidates: usize,
    pub tests: OmegaTests,
    pub alphabet_cap: usize,
    /// entropy of mu used for the bracket
    pub h_mu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorseshoeModel {
    pub alphabet: Vec<TorusPoint>,
    pub m: usize,
    pub n: usize,
    pub epsilon: f64,
    pub rho: f64,
    pub c_hat: f64,
    pub separation: f64,
    pub entropy_estimate: f64,
    pub selection: SymbolSelection,
    pub separated: usize,
    pub omega: OmegaSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmegaSummary {
    pub tested: usize,
    pub accepted: usize,
    pub fail_recurrence: usize,
    pub fail_density: usize,
    pub fail_birkhoff: usize,
    pub dominant: String,
    pub pass_rates: [f64; 3],
}

/// Partition mesh from rho < min(rho1 / 2C^, beta^, eps / 2C^).
pub fn partition_mesh(c_hat: f64, beta_hat: f64, rho1: f64, epsilon: f64) -> f64 {
    0.99 * (rho1 / (2.0 * c_hat)).min(beta_hat).min(epsilon / (2.0 * c_hat))
}

pub fn build_horseshoe(
    map: &dyn DiscreteMap,
    mu: &EmpiricalMeasure,
    cfg: &HorseshoeConfig,
) -> Result<HorseshoeModel> {
    if mu.support.is_empty() {
        return Err(Error::Precondition("missing support sample".into()));
    }
    let rho = cfg
        .rho
        .unwrap_or_else(|| partition_mesh(cfg.c_hat, cfg.beta_hat, cfg.rho1, cfg.epsilon));
    let partition = GridPartition::new(rho)?;
    let family = CharacterFamily::new(cfg.j);
    let stride = (mu.support.len() / cfg.candidates.max(1)).max(1);
    let cands: Vec<TorusPoint> = mu.support.iter().step_by(stride).copied().collect();
    let omega = omega_filter(map, &cands, cfg.n, cfg.epsilon, &partition, &family, mu, &cfg.tests)?;
    let delta = 2.0 * cfg.c_hat * rho;
    let pts: Vec<TorusPoint> = omega.accepted.iter().map(|c| c.point).collect();
    let sep = separated_set(map, &pts, cfg.n, delta);
    let returns: Vec<Vec<usize>> = sep.iter().map(|&i| omega.accepted[i].returns.clone()).collect();
    let cells: Vec<usize> = sep.iter().map(|&i| omega.accepted[i].cell).collect();
    let selection = select_symbols(&returns, &cells, cfg.n, cfg.epsilon, cfg.h_mu, cfg.alphabet_cap)?;
    let alphabet: Vec<TorusPoint> = selection.selected.iter().map(|&i| pts[sep[i]]).collect();
    let m = selection.m;
    Ok(HorseshoeModel {
        entropy_estimate: (alphabet.len() as f64).ln() / m as f64,
        alphabet,
        m,
        n: cfg.n,
        epsilon: cfg.epsilon,
        rho: partition.diameter(),
        c_hat: cfg.c_hat,
        separation: delta,
        separated: sep.len(),
        selection,
        omega: OmegaSummary {
            tested: omega.tested,
            accepted: omega.accepted.len(),
            fail_recurrence: omega.fail_recurrence,
            fail_density: omega.fail_density,
            fail_birkhoff: omega.fail_birkhoff,
            dominant: omega.dominant,
            pass_rates: omega.pass_rates,
        },
    })
}

/// Empirical shadowing constant and jump bound: random pseudo-orbits with
/// return time m and jumps of size beta, shadowed by Newton. C^ is the
/// largest observed error over beta; beta^ the largest beta in `betas` at
/// which every trial converges with C^ <= `c_cap`.
pub fn empirical_shadow_constants(
    map: &dyn DiscreteMap,
    starts: &[TorusPoint],
    m: usize,
    betas: &[f64],
    trials: usize,
    c_cap: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = betas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for &beta in &sorted {
        let mut c: f64 = 0.0;
        let mut ok = true;
        for _ in 0..trials {
            let mut pts = vec![starts[rng.random_range(0..starts.len())]];
            for _ in 0..4 {
                let img = (0..m).fold(*pts.last().unwrap(), |p, _| map.forward(&p));
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                pts.push(img.offset(Vec2::new(a.cos(), a.sin()) * beta));
            }
            let po = PseudoOrbit::new(-2, pts, vec![m; 5], beta, 1.0, false)?;
            match shadow_newton(map, &po, 1.0, 0.0, &NewtonConfig::default()) {
                Ok(r) => c = c.max(r.max_error() / beta),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && c <= c_cap {
            return Ok((c.max(1.0), beta));
        }
    }
    Err(Error::Solver("no jump size in the grid is shadowed".into()))
}

// ---------------------------------------------------------------------------
// audits

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorseshoeAudit {
    pub entropy_estimate: f64,
    pub h_mu: f64,
    pub entropy_gap: f64,
    pub entropy_pass: bool,
    pub hausdorff: f64,
    pub hausdorff_pass: bool,
    pub measure_distance: MeasureDistance,
    pub measure_pass: bool,
    /// smallest margins log m(Df^m|E) - (chi_E - eps) m and (chi_F + eps) m - log ||Df^m|F||
    pub min_margin_e: f64,
    pub min_margin_f: f64,
    pub hyperbolicity_pass: bool,
    pub word_pairs: usize,
    pub min_witness: f64,
    pub injectivity_pass: bool,
    pub coded_points: usize,
    /// decoded points and their iterates, for plotting
    #[serde(skip)]
    pub cloud: Vec<TorusPoint>,
}

/// Log restricted norms of Df^m on E and F at x, in precise frames.
pub fn restricted_logs(map: &dyn DiscreteMap, s: &dyn Splitting, x: &TorusPoint, m: usize) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    let mut p = *x;
    let mut fr = [s.frame_precise(E, &p), s.frame_precise(F, &p)];
    for _ in 0..m {
        let q = map.forward(&p);
        let to = [s.frame_precise(E, &q), s.frame_precise(F, &q)];
        let jac: Mat2 = map.derivative(&p);
        for (b, o) in out.iter_mut().enumerate() {
            *o += step_log_factor(&jac, &fr, &to, b, &p)?;
        }
        p = q;
        fr = to;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AuditConfig {
    pub chi_e: f64,
    pub chi_f: f64,
    pub h_mu: f64,
    /// short words over the first two symbols, all of this length
    pub word_length: usize,
    /// extra random words over the whole alphabet
    pub random_words: usize,
    /// length of the long word whose orbit gives the measure nu
    pub long_word: usize,
    pub seed: u64,
}

pub fn horseshoe_audit(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    model: &HorseshoeModel,
    mu: &EmpiricalMeasure,
    cfg: &AuditConfig,
) -> Result<HorseshoeAudit> {
    let eps = model.epsilon;
    let m = model.m;
    let k = model.alphabet.len();
    let entropy_gap = (model.entropy_estimate - cfg.h_mu).abs();
    // item (4)
    let logs: Vec<[f64; 2]> = model
        .alphabet
        .par_iter()
        .map(|x| restricted_logs(map, s, x, m))
        .collect::<Result<_>>()?;
    let min_margin_e = logs
        .iter()
        .map(|l| l[E] - (cfg.chi_e - eps) * m as f64)
        .fold(f64::INFINITY, f64::min);
    let min_margin_f = logs
        .iter()
        .map(|l| (cfg.chi_f + eps) * m as f64 - l[F])
        .fold(f64::INFINITY, f64::min);
    // words: all words of the given length over the first two symbols, plus random ones
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.word_length.max(1);
    let base = k.min(2);
    let mut words: Vec<Vec<usize>> = (0..base.pow(l as u32))
        .map(|c| (0..l).map(|i| (c / base.pow(i as u32)) % base).collect())
        .collect();
    for _ in 0..cfg.random_words {
        words.push((0..l).map(|_| rng.random_range(0..k)).collect());
    }
    words.sort();
    words.dedup();
    let coded: Vec<CodedPoint> = words
        .par_iter()
        .map(|w| code_word(map, &model.alphabet, m, w, true))
        .collect::<Result<_>>()?;
    let mut min_witness = f64::INFINITY;
    let mut pairs = 0;
    for i in 0..coded.len() {
        for j in i + 1..coded.len() {
            pairs += 1;
            min_witness = min_witness.min(injectivity_witness(&coded[i], &coded[j], m));
        }
    }
    if pairs == 0 {
        min_witness = 0.0;
    }
    // item (2): decoded points and their iterates vs the support sample
    let cloud: Vec<TorusPoint> = coded.iter().flat_map(|c| c.orbit.iter().copied()).collect();
    let haus = hausdorff(&cloud, &mu.support);
    // item (3): empirical measure of one long coded orbit
    let long: Vec<usize> = (0..cfg.long_word.max(1)).map(|_| rng.random_range(0..k)).collect();
    let nu = code_word(map, &model.alphabet, m, &long, false)?;
    let family = CharacterFamily::new(mu.integrals.len());
    let md = measure_distance(&mu.integrals, &family.averages(&nu.orbit));
    Ok(HorseshoeAudit {
        entropy_estimate: model.entropy_estimate,
        h_mu: cfg.h_mu,
        entropy_gap,
        entropy_pass: entropy_gap <= eps,
        hausdorff: haus,
        hausdorff_pass: haus <= eps,
        measure_pass: md.bound <= eps,
        measure_distance: md,
        min_margin_e,
        min_margin_f,
        hyperbolicity_pass: min_margin_e > 0.0 && min_margin_f > 0.0,
        word_pairs: pairs,
        injectivity_pass: pairs == 0 || min_witness > 0.0,
        min_witness,
        coded_points: coded.len(),
        cloud,
    })
}

// ---------------------------------------------------------------------------
// periodic points

/// Number of fixed points of A^n on the torus, |det(A^n - I)|.
pub fn lefschetz_count(a: &Mat2, n: usize) -> f64 {
    let mut p = Mat2::identity();
    for _ in 0..n {
        p *= a;
    }
    (p - Mat2::identity()).determinant().abs().round()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub word_length: usize,
    pub period: usize,
    pub words: usize,
    pub distinct: usize,
    pub rate: f64,
    pub lefschetz: Option<f64>,
}

/// Distinct periodic points coded by all words of length L over `symbols`,
/// per L, with rate log(count) / (L m).
pub fn periodic_growth(
    map: &dyn DiscreteMap,
    alphabet: &[TorusPoint],
    symbols: &[usize],
    m: usize,
    lengths: &[usize],
    tol: f64,
    linear: Option<&Mat2>,
) -> Result<Vec<GrowthPoint>> {
    let k = symbols.len();
    let mut out = Vec::new();
    for &l in lengths {
        if k == 0 || l == 0 {
            continue;
        }
        let words: Vec<Vec<usize>> = (0..k.pow(l as u32))
            .map(|c| (0..l).map(|i| symbols[(c / k.pow(i as u32)) % k]).collect())
            .collect();
        let pts: Vec<TorusPoint> = words
            .par_iter()
            .map(|w| code_word(map, alphabet, m, w, true).map(|c| c.z))
            .collect::<Result<_>>()?;
        let mut distinct: Vec<TorusPoint> = Vec::new();
        for p in pts {
            if distinct.iter().all(|q| q.distance(&p) > tol) {
                distinct.push(p);
            }
        }
        let period = l * m;
        let count = distinct.len();
        out.push(GrowthPoint {
            word_length: l,
            period,
            words: words.len(),
            distinct: count,
            rate: (count as f64).ln() / period as f64,
            lefschetz: linear.map(|a| lefschetz_count(a, period)),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// desk-scale pipeline

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KatokRow {
    pub rho: f64,
    pub count: usize,
    pub rate: f64,
    pub saturated: bool,
}

/// Separated-set counts of a sample at scale rho, per rho; a count above half
/// the sample is flagged as saturated.
pub fn katok_counts(map: &dyn DiscreteMap, sample: &[TorusPoint], n: usize, rhos: &[f64]) -> Vec<KatokRow> {
    rhos.iter()
        .map(|&rho| {
            let count = separated_set(map, sample, n, rho).len();
            KatokRow {
                rho,
                count,
                rate: (count.max(1) as f64).ln() / n as f64,
                saturated: 2 * count > sample.len(),
            }
        })
        .collect()
}

/// Largest rho whose rate is within eps of the rate at the next smaller scale,
/// ignoring saturated rows; the largest scale if no pair qualifies.
pub fn katok_scale(rows: &[KatokRow], eps: f64) -> f64 {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.rho.total_cmp(&a.rho));
    sorted
        .windows(2)
        .find(|w| !w[0].saturated && !w[1].saturated && (w[1].rate - w[0].rate).abs() <= eps)
        .map(|w| w[0].rho)
        .or(sorted.first().map(|r| r.rho))
        .unwrap_or(f64::INFINITY)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NConstraint {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

/// The conditions on n used in the construction, evaluated at the given values.
pub fn n_constraints(n: usize, eps: f64, h: f64, alphabet: usize) -> Vec<NConstraint> {
    let nf = n as f64;
    let lower = ((h - 3.0 * eps) * nf).exp();
    let upper = ((h + 3.0 * eps) * nf).exp();
    vec![
        NConstraint {
            name: "n*eps + 1 < e^(eps n)".into(),
            holds: nf * eps + 1.0 < (eps * nf).exp(),
            detail: format!("{:.4} vs {:.4}", nf * eps + 1.0, (eps * nf).exp()),
        },
        NConstraint {
            name: "alphabet >= e^((h-3eps)n)".into(),
            holds: alphabet as f64 >= lower,
            detail: format!("{alphabet} vs {lower:.3}"),
        },
        NConstraint {
            name: "alphabet <= e^((h+3eps)n)".into(),
            holds: alphabet as f64 <= upper,
            detail: format!("{alphabet} vs {upper:.3}"),
        },
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorseshoeParams {
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub measure_steps: usize,
    pub burn_in: usize,
    pub support_size: usize,
    pub candidates: usize,
    pub j: usize,
    pub alphabet_cap: usize,
    pub betas: Vec<f64>,
    pub katok_sample: usize,
    pub katok_rhos: Vec<f64>,
    /// enforce the density and Birkhoff tests of Ω_{t,n}
    pub full_omega: bool,
    pub audit_word_length: usize,
    pub audit_random_words: usize,
    pub audit_long_word: usize,
    pub lyapunov_steps: usize,
    /// keep only the first k symbols before the audit
    pub alphabet_trim: Option<usize>,
    /// size of the support subsample kept for plotting
    pub plot_support: usize,
}

impl HorseshoeParams {
    pub fn desk(n: usize, epsilon: f64, seed: u64) -> Self {
        HorseshoeParams {
            n,
            epsilon,
            seed,
            measure_steps: 1_000_000,
            burn_in: 1000,
            support_size: 200_000,
            candidates: 200_000,
            j: DEFAULT_J,
            alphabet_cap: 10_000,
            betas: vec![0.4, 0.2, 0.1, 0.05, 0.02, 0.01, 1e-3],
            katok_sample: 3000,
            katok_rhos: vec![0.4, 0.2, 0.1, 0.05],
            full_omega: false,
            audit_word_length: 3,
            audit_random_words: 24,
            audit_long_word: 200,
            lyapunov_steps: 100_000,
            alphabet_trim: None,
            plot_support: 5000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorseshoeRun {
    pub chi_e: f64,
    pub chi_f: f64,
    pub h_mu: f64,
    pub c_hat: f64,
    pub beta_hat: f64,
    pub rho1: f64,
    pub katok: Vec<KatokRow>,
    pub model: HorseshoeModel,
    pub audit: HorseshoeAudit,
    pub constraints: Vec<NConstraint>,
    #[serde(skip)]
    pub support_sample: Vec<TorusPoint>,
}

/// Full pipeline: empirical measure, exponents, empirical shadowing
/// constants, Katok scale, Ω filter, separated set, symbols, coding and audits.
pub fn run_horseshoe(map: &dyn DiscreteMap, s: &dyn Splitting, p: &HorseshoeParams) -> Result<HorseshoeRun> {
    if p.n == 0 || !(p.epsilon > 0.0) {
        return Err(Error::Precondition("n and epsilon must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let x0 = TorusPoint::new(rng.random(), rng.random());
    let family = CharacterFamily::new(p.j);
    let mu = EmpiricalMeasure::from_orbit(map, &x0, p.measure_steps, p.burn_in, &family, p.support_size)?;
    let lyap = crate::cocycle::lyapunov_estimate(map, s, &mu.support[0], p.lyapunov_steps)?;
    let (chi_e, chi_f) = (lyap.chi_e(), lyap.chi_f());
    let h_mu = chi_e;
    let kstride = (mu.support.len() / p.katok_sample.max(1)).max(1);
    let ksample: Vec<TorusPoint> = mu.support.iter().step_by(kstride).copied().collect();
    let katok = katok_counts(map, &ksample, p.n, &p.katok_rhos);
    let rho1 = katok_scale(&katok, p.epsilon);
    let (c_hat, beta_hat) = empirical_shadow_constants(map, &ksample, p.n, &p.betas, 8, 2.0, p.seed ^ 0x5eed)?;
    let mut tests = OmegaTests::all(p.n);
    if !p.full_omega {
        tests.density = false;
        tests.birkhoff = false;
    }
    let cfg = HorseshoeConfig {
        n: p.n,
        epsilon: p.epsilon,
        c_hat,
        beta_hat,
        rho1,
        rho: None,
        j: p.j,
        candidates: p.candidates,
        tests,
        alphabet_cap: p.alphabet_cap,
        h_mu,
    };
    let mut model = build_horseshoe(map, &mu, &cfg)?;
    if let Some(k) = p.alphabet_trim {
        if k == 0 {
            return Err(Error::Precondition("alphabet trimmed to nothing".into()));
        }
        model.alphabet.truncate(k);
        model.entropy_estimate = (model.alphabet.len() as f64).ln() / model.m as f64;
    }
    let audit = horseshoe_audit(
        map,
        s,
        &model,
        &mu,
        &AuditConfig {
            chi_e,
            chi_f,
            h_mu,
            word_length: p.audit_word_length,
            random_words: p.audit_random_words,
            long_word: p.audit_long_word,
            seed: p.seed,
        },
    )?;
    let constraints = n_constraints(p.n, p.epsilon, h_mu, model.alphabet.len());
    let pstride = (mu.support.len() / p.plot_support.max(1)).max(1);
    let support_sample = mu.support.iter().step_by(pstride).copied().collect();
    Ok(HorseshoeRun {
        chi_e,
        chi_f,
        h_mu,
        c_hat,
        beta_hat,
        rho1,
        katok,
        model,
        audit,
        constraints,
        support_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{ConstantSplitting, TorusMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn lp() -> f64 {
        (3.0 + 5f64.sqrt()) / 2.0
    }

    fn eu() -> Vec2 {
        Vec2::new(1.0, lp() - 2.0).normalize()
    }

    fn cat_mu(steps: usize, support: usize) -> EmpiricalMeasure {
        let f = TorusMap::cat();
        let fam = CharacterFamily::new(DEFAULT_J);
        EmpiricalMeasure::from_orbit(&f, &TorusPoint::new(2f64.sqrt() - 1.0, 0.5 * (5f64.sqrt() - 1.0)), steps, 1000, &fam, support).unwrap()
    }

    #[test]
    fn dn_basic_cases() {
        let f = TorusMap::cat();
        let x = TorusPoint::new(0.3, 0.6);
        assert_eq!(dn_distance(&f, &x, &x, 5), 0.0);
        let y = TorusPoint::new(0.31, 0.58);
        assert_eq!(dn_distance(&f, &x, &y, 1), x.distance(&y));
        let eta = 1e-6;
        let z = x.offset(eu() * eta);
        for n in [1usize, 5, 10] {
            let want = lp().powi(n as i32 - 1) * eta;
            assert!((dn_distance(&f, &x, &z, n) - want).abs() < 1e-9 * want + 1e-12);
        }
    }

    #[test]
    fn characters_are_unit_and_ordered() {
        let fam = CharacterFamily::new(20);
        assert_eq!(fam.len(), 20);
        let norms: Vec<i32> = fam.freqs.iter().map(|(k, _)| k[0] * k[0] + k[1] * k[1]).collect();
        assert!(norms.windows(2).all(|w| w[0] <= w[1]));
        let x = TorusPoint::new(0.123, 0.456);
        for j in 0..20 {
            assert!(fam.eval(j, &x).abs() <= 1.0);
        }
    }

    #[test]
    fn measure_distance_is_a_metric_on_samples() {
        let fam = CharacterFamily::new(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clouds: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let pts: Vec<TorusPoint> = (0..50).map(|_| TorusPoint::new(rng.random(), rng.random())).collect();
                fam.averages(&pts)
            })
            .collect();
        assert_eq!(measure_distance(&clouds[0], &clouds[0]).value, 0.0);
        let d = |i: usize, j: usize| measure_distance(&clouds[i], &clouds[j]).value;
        assert_eq!(d(0, 1), d(1, 0));
        assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    }

    #[test]
    fn fixed_point_fails_density() {
        let f = TorusMap::cat();
        let mu = cat_mu(200_000, 20_000);
        let part = GridPartition::new(0.1).unwrap();
        let fam = CharacterFamily::new(DEFAULT_J);
        let r = omega_filter(&f, &[TorusPoint::new(0.0, 0.0)], 20, 0.2, &part, &fam, &mu, &OmegaTests::all(20));
        match r {
            Err(Error::Precondition(msg)) => assert!(msg.contains("density") || msg.contains("birkhoff")),
            other => panic!("expected rejection, got {:?}", other.map(|o| o.accepted.len())),
        }
    }

    #[test]
    fn generic_points_pass_all_three_tests() {
        let f = TorusMap::cat();
        let mu = cat_mu(200_000, 20_000);
        let fam = CharacterFamily::new(DEFAULT_J);
        let part = GridPartition::new(0.5).unwrap();
        let n = 1000;
        let cands: Vec<TorusPoint> = (0..40)
            .map(|i| {
                let i = i as f64;
                TorusPoint::new((0.1234567 + i * 0.6180339887).fract(), (0.7654321 + i * 0.41421356).fract())
            })
            .collect();
        let rep = omega_filter(&f, &cands, n, 0.2, &part, &fam, &mu, &OmegaTests::all(n)).unwrap();
        // density always holds; Birkhoff fluctuations at n = 1000 are of the order of eps/4
        assert_eq!(rep.pass_rates[1], 1.0);
        assert!(rep.pass_rates[2] >= 0.2, "{:?}", rep.pass_rates);
        for c in &rep.accepted {
            assert!(!c.returns.is_empty());
            assert!(c.density_radius.unwrap() <= 0.1);
            assert!(c.birkhoff_dev.unwrap() <= 0.05);
        }
        // empirical integrals of the characters vs the Lebesgue ones
        assert!(mu.integrals.iter().all(|v| v.abs() < 0.02));
    }

    #[test]
    fn separated_set_edge_cases_and_maximality() {
        let f = TorusMap::cat();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<TorusPoint> = (0..400).map(|_| TorusPoint::new(rng.random(), rng.random())).collect();
        assert_eq!(separated_set(&f, &pts, 4, 0.0).len(), 400);
        assert_eq!(separated_set(&f, &pts, 4, 1.0).len(), 1);
        let sel = separated_set(&f, &pts, 4, 0.1);
        let table = OrbitTable::new(&f, &pts, 4);
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                assert!(table.dn(i, j) >= 0.1);
            }
        }
        for i in 0..pts.len() {
            if !sel.contains(&i) {
                assert!(sel.iter().any(|&j| table.dn(i, j) < 0.1));
            }
        }
    }

    #[test]
    fn separated_count_brackets_entropy() {
        let f = TorusMap::cat();
        let mu = cat_mu(1_000_000, 10_000);
        let e = separated_set(&f, &mu.support, 8, 0.1);
        let c = (0.96f64 * 8.0).exp();
        assert!(e.len() as f64 >= c / 64.0 && e.len() as f64 <= 64.0 * c, "{}", e.len());
    }

    #[test]
    fn symbol_selection_argmax() {
        let sel = select_symbols(&[vec![5]], &[0], 5, 0.2, 1.0, 100).unwrap();
        assert_eq!(sel.m, 5);
        assert_eq!(sel.selected, vec![0]);
        let returns = vec![vec![10]; 8];
        let cells = vec![1, 1, 1, 2, 2, 2, 2, 2];
        let sel = select_symbols(&returns, &cells, 10, 0.3, 1.0, 100).unwrap();
        assert_eq!(sel.cell, 2);
        assert_eq!(sel.selected.len(), 5);
        assert!(select_symbols(&[vec![]], &[0], 5, 0.2, 1.0, 10).is_err());
    }

    #[test]
    fn constant_word_codes_the_nearby_periodic_point() {
        let f = TorusMap::cat();
        let x = TorusPoint::new(0.2, 0.3);
        let c = code_word(&f, &[x], 3, &[0], true).unwrap();
        let back = (0..3).fold(c.z, |p, _| f.forward(&p));
        assert!(back.distance(&c.z) < 1e-12);
        let c2 = code_word(&f, &[x], 3, &[0, 0], true).unwrap();
        assert!(c2.z.distance(&c.z) < 1e-12);
    }

    #[test]
    fn distinct_words_decode_apart() {
        let f = TorusMap::cat();
        let alphabet = [TorusPoint::new(0.2, 0.3), TorusPoint::new(0.25, 0.28)];
        let m = 6;
        let mut coded = Vec::new();
        for c in 0..8usize {
            let w: Vec<usize> = (0..3).map(|i| (c >> i) & 1).collect();
            coded.push(code_word(&f, &alphabet, m, &w, true).unwrap());
        }
        let sep = dn_distance(&f, &alphabet[0], &alphabet[1], m);
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(injectivity_witness(&coded[i], &coded[j], m) > 0.5 * sep);
            }
        }
    }

    #[test]
    fn open_word_shadow_matches_periodic_on_the_middle() {
        let f = TorusMap::cat();
        let alphabet = [TorusPoint::new(0.2, 0.3), TorusPoint::new(0.25, 0.28)];
        let w = [0usize, 1, 0, 1, 0, 1];
        let open = code_word(&f, &alphabet, 8, &w, false).unwrap();
        assert!(open.residual < 1e-12);
        assert_eq!(open.orbit.len(), 48);
        let per = code_word(&f, &alphabet, 8, &[0, 1], true).unwrap();
        assert!(open.orbit[16].distance(&per.orbit[0]) < 1e-6);
    }

    #[test]
    fn growth_rates_and_lefschetz() {
        let f = TorusMap::cat();
        let alphabet = [TorusPoint::new(0.2, 0.3), TorusPoint::new(0.27, 0.26)];
        let m = 5;
        let g = periodic_growth(&f, &alphabet, &[0, 1], m, &[1, 2, 3], 1e-9, Some(&f.linear)).unwrap();
        for p in &g {
            assert!(p.rate >= 2f64.ln() / m as f64 - 1e-3);
            assert!(p.distinct as f64 <= p.lefschetz.unwrap());
        }
        let single = periodic_growth(&f, &alphabet, &[0], m, &[1, 2], 1e-9, None).unwrap();
        assert!(single.iter().all(|p| p.rate == 0.0));
        assert_eq!(lefschetz_count(&f.linear, 1), 1.0);
        assert_eq!(lefschetz_count(&f.linear, 2), 5.0);
        let l = lp();
        assert_eq!(lefschetz_count(&f.linear, 7), (l.powi(7) + l.powi(-7) - 2.0).round());
    }

    #[test]
    fn single_symbol_has_zero_entropy() {
        let f = TorusMap::cat();
        let s = ConstantSplitting::cat();
        let mu = cat_mu(100_000, 5000);
        let x = TorusPoint::new(0.0, 0.0);
        let model = HorseshoeModel {
            alphabet: vec![x],
            m: 4,
            n: 4,
            epsilon: 0.3,
            rho: 0.1,
            c_hat: 1.0,
            separation: 0.2,
            entropy_estimate: 0.0,
            selection: select_symbols(&[vec![4]], &[0], 4, 0.3, lp().ln(), 10).unwrap(),
            separated: 1,
            omega: OmegaSummary {
                tested: 1,
                accepted: 1,
                fail_recurrence: 0,
                fail_density: 0,
                fail_birkhoff: 0,
                dominant: String::new(),
                pass_rates: [1.0; 3],
            },
        };
        let cfg = AuditConfig {
            chi_e: lp().ln(),
            chi_f: -lp().ln(),
            h_mu: lp().ln(),
            word_length: 2,
            random_words: 0,
            long_word: 4,
            seed: 1,
        };
        let a = horseshoe_audit(&f, &s, &model, &mu, &cfg).unwrap();
        assert_eq!(a.entropy_estimate, 0.0);
        assert!((a.entropy_gap - lp().ln()).abs() < 1e-15);
        assert!(!a.entropy_pass);
        assert!(a.hyperbolicity_pass);
        // self distance
        assert_eq!(measure_distance(&mu.integrals, &mu.integrals).value, 0.0);
    }

    #[test]
    fn katok_scale_picks_the_stable_rate() {
        let row = |rho: f64, rate: f64, saturated: bool| KatokRow { rho, count: 10, rate, saturated };
        let rows = vec![row(0.4, 0.5, false), row(0.2, 1.2, false), row(0.1, 1.3, false), row(0.05, 1.35, true)];
        assert_eq!(katok_scale(&rows, 0.2), 0.2);
        assert_eq!(katok_scale(&rows[..1], 0.2), 0.4);
        assert_eq!(katok_scale(&[], 0.2), f64::INFINITY);
    }

    #[test]
    fn n_constraints_report_the_bracket() {
        let c = n_constraints(12, 0.3, lp().ln(), 30);
        assert!(c.iter().all(|c| c.holds));
        let c = n_constraints(2, 0.01, lp().ln(), 100);
        assert!(c[0].holds);
        assert!(c[1].holds);
        assert!(!c[2].holds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn dn_is_a_metric_nondecreasing_in_n(
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
            d in 0.0f64..1.0, e in 0.0f64..1.0, g in 0.0f64..1.0, n in 1usize..8
        ) {
            let f = TorusMap::cat();
            let (x, y, z) = (TorusPoint::new(a, b), TorusPoint::new(c, d), TorusPoint::new(e, g));
            let dxy = dn_distance(&f, &x, &y, n);
            prop_assert_eq!(dxy, dn_distance(&f, &y, &x, n));
            prop_assert!(dxy >= x.distance(&y));
            prop_assert!(dxy <= dn_distance(&f, &x, &z, n) + dn_distance(&f, &z, &y, n) + 1e-12);
            prop_assert!(dn_distance(&f, &x, &y, n + 1) >= dxy);
        }
    }
}

//! Pseudo-orbits inside resonance blocks, the constructive shadowing solver
//! built from chains of admissible disks, a multiple-shooting Newton oracle,
//! closing of periodic pseudo-orbits, and the bookkeeping that lifts a
//! pseudo-orbit of f to one of f^N.
//!
//! All local computations are done in offsets relative to anchor points
//! (`DiscreteMap::forward_difference`), since absolute torus coordinates cannot
//! resolve the distances that appear along long chains.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockApproximation, Exponents};
use crate::cloud::CloudIndex;
use crate::cocycle::{step_log_factor, OrbitSegment};
use crate::error::{Error, Result};
use crate::manifolds::{backward_graph_step, chart_radius, intersect_disks, AdmissibleDisk, DEFAULT_DEGREE};
use crate::systems::{
    sin_angle, DiscreteMap, Mat2, Reversed, Splitting, Swapped, TorusPoint, Vec2, E, F,
};

pub const ENVELOPE_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 100;
pub const C0_SAFETY: f64 = 1.25;
const N_SEARCH_CAP: usize = 1_000_000;

// ---------------------------------------------------------------------------
// constants

/// Constants of the shadowing construction for a level t and a margin eps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShadowConstants {
    pub t: f64,
    pub epsilon: f64,
    pub exponents: Exponents,
    pub lambda: f64,
    /// chart radius r and the shrunk radius r1 = r e^{-eps}
    pub r: f64,
    pub r1: f64,
    pub c0: f64,
    pub h1: f64,
    pub n1: usize,
    pub tau: f64,
    pub c1: f64,
    pub beta0: f64,
    pub n2: usize,
    pub alpha: f64,
}

impl ShadowConstants {
    pub fn new(t: f64, epsilon: f64, exps: Exponents, r: f64, c0: f64) -> Result<Self> {
        if !(t >= 1.0) || !(epsilon > 0.0) || !(r > 0.0) || !(c0 >= 1.0) {
            return Err(Error::Precondition(format!(
                "bad constants input t={t} eps={epsilon} r={r} c0={c0}"
            )));
        }
        let lambda = (exps.chi_e - 2.0 * epsilon).min(-(exps.chi_f + 2.0 * epsilon));
        if lambda <= 0.0 {
            return Err(Error::Precondition(format!("lambda = {lambda} is not positive")));
        }
        let rate_f = exps.chi_f + 1.5 * epsilon;
        if rate_f >= 0.0 {
            return Err(Error::Precondition(format!(
                "chi_F + 3eps/2 = {rate_f} is not negative"
            )));
        }
        let r1 = r * (-epsilon).exp();
        let h1 = 0.99
            * ((r - r1) / (t * c0)).min(r1 / (2.0 * t * c0 * (0.5 * epsilon).exp()));
        let target = -(2.0 * t).ln();
        let n1 = (1..N_SEARCH_CAP)
            .find(|&n| rate_f * (n as f64) < target && c0 * t * (-lambda * n as f64).exp() < 1.0)
            .ok_or_else(|| Error::Precondition("no admissible N1".into()))?;
        let tau = c0 * t * (-lambda * n1 as f64).exp();
        let c1 = (1.0 + c0 + 3.0 * c0 * c0) / (1.0 - tau) * t;
        let beta0 = (1.0 - tau) * h1 / c1;
        let n2 = (n1..N_SEARCH_CAP)
            .find(|&n| {
                t * (-lambda * n as f64).exp() < 1.0 && 1.0 / t >= (-0.5 * epsilon * n as f64).exp()
            })
            .ok_or_else(|| Error::Precondition("no admissible N2".into()))?;
        let alpha = t * (-lambda * n2 as f64).exp();
        if alpha >= 1.0 {
            return Err(Error::Precondition(format!("alpha = {alpha} not below 1")));
        }
        Ok(ShadowConstants {
            t,
            epsilon,
            exponents: exps,
            lambda,
            r,
            r1,
            c0,
            h1,
            n1,
            tau,
            c1,
            beta0,
            n2,
            alpha,
        })
    }

    /// Measure r and C0 for the system, then derive the rest.
    pub fn measure(
        map: &dyn DiscreteMap,
        s: &dyn Splitting,
        t: f64,
        epsilon: f64,
        exps: Exponents,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let r = chart_radius(map, s, epsilon, 16);
        let c0 = measure_c0(s, samples, seed)?;
        Self::new(t, epsilon, exps, r, c0)
    }

    /// Radius of the disks in the chains, r1 / t.
    pub fn disk_radius(&self) -> f64 {
        self.r1 / self.t
    }

    /// Minimal return time (N2 + 1) N for pseudo-orbits of f built from blocks of f^N.
    pub fn n_hat(&self, n: usize) -> usize {
        (self.n2 + 1) * n
    }
}

/// C0 for straight disks through a common point: the largest ratio
/// max(d(x,z), d(y,z)) / d(x,y) over x on the E-line and y on the F-line is
/// 1 / sin(angle(E, F)). Sampled over random base points, times a safety factor.
pub fn measure_c0(s: &dyn Splitting, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 1.0;
    for _ in 0..samples.max(1) {
        let x = TorusPoint::new(rng.random(), rng.random());
        let sa = sin_angle(&s.frame_precise(E, &x), &s.frame_precise(F, &x));
        if sa < 1e-12 {
            return Err(Error::FrameDegenerate {
                x: x.coords[0],
                y: x.coords[1],
            });
        }
        worst = worst.max(1.0 / sa);
    }
    Ok(C0_SAFETY * worst)
}

// ---------------------------------------------------------------------------
// pseudo-orbits

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PseudoOrbit {
    /// index of the first entry, -K for a window [-K, K]
    pub k_min: i64,
    pub points: Vec<TorusPoint>,
    pub steps: Vec<usize>,
    pub beta: f64,
    pub block_level: f64,
    pub periodic: bool,
}

/// A pseudo-orbit unrolled into one sequence of anchors P_0..P_L with the
/// defects d_i = f(P_i) - P_{i+1}.
pub struct Expanded {
    pub anchors: Vec<TorusPoint>,
    pub defects: Vec<Vec2>,
    /// position of x_k in the anchor sequence, per entry
    pub starts: Vec<usize>,
}

impl PseudoOrbit {
    pub fn new(
        k_min: i64,
        points: Vec<TorusPoint>,
        steps: Vec<usize>,
        beta: f64,
        block_level: f64,
        periodic: bool,
    ) -> Result<Self> {
        if points.is_empty() || points.len() != steps.len() {
            return Err(Error::Precondition(format!(
                "{} points but {} return times",
                points.len(),
                steps.len()
            )));
        }
        if steps.contains(&0) {
            return Err(Error::Precondition("return times must be positive".into()));
        }
        Ok(PseudoOrbit {
            k_min,
            points,
            steps,
            beta,
            block_level,
            periodic,
        })
    }

    /// A periodic pseudo-orbit x_k = x0, n_k = n0 over [-K, K].
    pub fn periodic_chain(x0: TorusPoint, n0: usize, k: usize, beta: f64, t: f64) -> Result<Self> {
        let m = 2 * k + 1;
        Self::new(-(k as i64), vec![x0; m], vec![n0; m], beta, t, true)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn k_max(&self) -> i64 {
        self.k_min + self.len() as i64 - 1
    }

    pub fn index(&self, k: i64) -> Option<usize> {
        (k >= self.k_min && k <= self.k_max()).then(|| (k - self.k_min) as usize)
    }

    pub fn point(&self, k: i64) -> Option<&TorusPoint> {
        self.index(k).map(|i| &self.points[i])
    }

    pub fn n(&self, k: i64) -> Option<usize> {
        self.index(k).map(|i| self.steps[i])
    }

    /// s_0 = 0, s_k = n_0 + ... + n_{k-1} for k > 0, s_k = -(n_k + ... + n_{-1}) for k < 0.
    pub fn s(&self, k: i64) -> i64 {
        let n = |j: i64| self.n(j).unwrap_or(0) as i64;
        if k >= 0 {
            (0..k).map(n).sum()
        } else {
            -(k..0).map(n).sum::<i64>()
        }
    }

    /// Jump vectors f^{n_k}(x_k) - x_{k+1} for consecutive entries.
    pub fn jump_vectors(&self, map: &dyn DiscreteMap) -> Vec<Vec2> {
        self.points
            .windows(2)
            .zip(&self.steps)
            .map(|(w, &n)| {
                let img = (0..n).fold(w[0], |p, _| map.forward(&p));
                w[1].displacement_to(&img)
            })
            .collect()
    }

    pub fn measured_beta(&self, map: &dyn DiscreteMap) -> f64 {
        self.jump_vectors(map).iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Replace an undeclared (NaN) beta by the measured maximum jump.
    pub fn with_measured_beta(mut self, map: &dyn DiscreteMap) -> Self {
        if self.beta.is_nan() {
            self.beta = self.measured_beta(map);
        }
        self
    }

    /// Measured jumps must not exceed the declared beta.
    pub fn check_jumps(&self, map: &dyn DiscreteMap) -> Result<()> {
        let m = self.measured_beta(map);
        if m > self.beta * (1.0 + 1e-9) + 1e-15 {
            return Err(Error::Precondition(format!(
                "measured jump {m:e} exceeds declared beta {:e}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Every x_k and f^{n_k}(x_k) within `mesh + slack` of the block cloud.
    pub fn check_membership(&self, map: &dyn DiscreteMap, cloud: &CloudIndex, mesh: f64, slack: f64) -> Result<()> {
        for (i, (x, &n)) in self.points.iter().zip(&self.steps).enumerate() {
            let img = (0..n).fold(*x, |p, _| map.forward(&p));
            for q in [x, &img] {
                let gap = cloud.nearest(q).map(|(_, d)| d).unwrap_or(f64::INFINITY);
                if gap > mesh + slack {
                    return Err(Error::NoBlockPoint {
                        k: self.k_min + i as i64,
                        gap,
                        beta: slack,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn expand(&self, map: &dyn DiscreteMap) -> Expanded {
        let m = self.len();
        let mut anchors = Vec::new();
        let mut starts = Vec::with_capacity(m);
        for i in 0..m - 1 {
            starts.push(anchors.len());
            let mut p = self.points[i];
            for _ in 0..self.steps[i] {
                anchors.push(p);
                p = map.forward(&p);
            }
        }
        starts.push(anchors.len());
        anchors.push(self.points[m - 1]);
        let defects = anchors
            .windows(2)
            .map(|w| w[1].displacement_to(&map.forward(&w[0])))
            .collect();
        Expanded {
            anchors,
            defects,
            starts,
        }
    }

    pub fn total_length(&self) -> usize {
        self.steps[..self.len() - 1].iter().sum()
    }

    /// Line-oriented text: header lines `beta v`, `t v`, `periodic b`, then
    /// one `k x1 x2 n_k` line per entry. `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("beta {:e}\n", self.beta));
        out.push_str(&format!("t {}\n", self.block_level));
        out.push_str(&format!("periodic {}\n", self.periodic));
        for (i, (p, n)) in self.points.iter().zip(&self.steps).enumerate() {
            out.push_str(&format!(
                "{} {:.17e} {:.17e} {}\n",
                self.k_min + i as i64,
                p.coords[0],
                p.coords[1],
                n
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut beta = f64::NAN;
        let mut t = 1.0;
        let mut periodic = false;
        let mut k_min = None;
        let mut points = Vec::new();
        let mut steps = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let toks: Vec<&str> = body.split_whitespace().collect();
            let perr = |msg: String| Error::Parse { line, msg };
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| perr(format!("bad number `{s}`")))?;
                if !v.is_finite() {
                    return Err(perr(format!("non-finite value `{s}`")));
                }
                Ok(v)
            };
            match toks[0] {
                "beta" | "t" | "periodic" if toks.len() == 2 => match toks[0] {
                    "beta" => beta = num(toks[1])?,
                    "t" => t = num(toks[1])?,
                    _ => {
                        periodic = toks[1]
                            .parse()
                            .map_err(|_| perr(format!("bad flag `{}`", toks[1])))?
                    }
                },
                _ => {
                    if toks.len() != 4 {
                        return Err(perr(format!("expected `k x1 x2 n_k`, got {} fields", toks.len())));
                    }
                    let k: i64 = toks[0].parse().map_err(|_| perr(format!("bad index `{}`", toks[0])))?;
                    let expect = k_min.map(|k0: i64| k0 + points.len() as i64);
                    if let Some(e) = expect {
                        if k != e {
                            return Err(perr(format!("index {k} out of sequence, expected {e}")));
                        }
                    } else {
                        k_min = Some(k);
                    }
                    let (x1, x2) = (num(toks[1])?, num(toks[2])?);
                    let n: usize = toks[3]
                        .parse()
                        .map_err(|_| perr(format!("bad return time `{}`", toks[3])))?;
                    if n == 0 {
                        return Err(perr("return time must be positive".into()));
                    }
                    points.push(TorusPoint::new(x1, x2));
                    steps.push(n);
                }
            }
        }
        let k_min = k_min.ok_or(Error::Parse {
            line: 0,
            msg: "no entries".into(),
        })?;
        Self::new(k_min, points, steps, beta, t, periodic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildMode {
    /// x_{k+1} drawn from block points within beta of f^{n_k}(x_k).
    Snap,
    /// x_{k+1} = f^{n_k}(x_k) + xi with |xi| in [beta/2, beta], random direction.
    Jitter,
}

#[derive(Clone, Debug)]
pub struct BuildSpec {
    pub beta: f64,
    pub n: usize,
    pub window: usize,
    pub seed: u64,
    pub mode: BuildMode,
}

const JITTER_TRIES: usize = 100;
const AMBIENT_SAMPLES: usize = 4096;

/// Covering radius of the cloud over random points of the torus. The block
/// mesh is measured on orbit points only; jittered points are generic.
pub fn ambient_mesh(cloud: &CloudIndex, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let qs: Vec<TorusPoint> = (0..AMBIENT_SAMPLES)
        .map(|_| TorusPoint::new(rng.random(), rng.random()))
        .collect();
    cloud.covering_radius(&qs)
}

/// A pseudo-orbit over [-K, K] with return times `spec.n`, starting at a
/// random block point.
pub fn build_pseudo_orbit(
    map: &dyn DiscreteMap,
    block: &BlockApproximation,
    spec: &BuildSpec,
) -> Result<PseudoOrbit> {
    if block.points.is_empty() {
        return Err(Error::Precondition("empty block cloud".into()));
    }
    if spec.n == 0 || !(spec.beta >= 0.0) {
        return Err(Error::Precondition("need n >= 1 and beta >= 0".into()));
    }
    let m = 2 * spec.window + 1;
    let k_min = -(spec.window as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud = CloudIndex::new(block.points.clone());
    let mesh = block.mesh.max(ambient_mesh(&cloud, spec.seed));
    let mut points = Vec::with_capacity(m);
    match spec.mode {
        BuildMode::Snap | BuildMode::Jitter => {
            points.push(block.points[rng.random_range(0..block.points.len())]);
            for i in 0..m - 1 {
                let img = (0..spec.n).fold(points[i], |p, _| map.forward(&p));
                let k = k_min + i as i64 + 1;
                let next = if spec.mode == BuildMode::Snap {
                    let near = cloud.within(&img, spec.beta);
                    if near.is_empty() {
                        let gap = cloud.nearest(&img).map(|(_, d)| d).unwrap_or(f64::INFINITY);
                        return Err(Error::NoBlockPoint { k, gap, beta: spec.beta });
                    }
                    block.points[near[rng.random_range(0..near.len())]]
                } else {
                    let mut found = None;
                    let mut gap = f64::INFINITY;
                    for _ in 0..JITTER_TRIES {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let rad = spec.beta * rng.random_range(0.5..=1.0);
                        let cand = img.offset(Vec2::new(a.cos(), a.sin()) * rad);
                        let g = cloud.nearest(&cand).map(|(_, d)| d).unwrap_or(f64::INFINITY);
                        gap = gap.min(g);
                        if g <= mesh + spec.beta {
                            found = Some(cand);
                            break;
                        }
                    }
                    found.ok_or(Error::NoBlockPoint { k, gap, beta: spec.beta })?
                };
                points.push(next);
            }
        }
    }
    let po = PseudoOrbit::new(k_min, points, vec![spec.n; m], spec.beta, block.t, false)?;
    po.check_jumps(map)?;
    Ok(po)
}

// ---------------------------------------------------------------------------
// results and envelopes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Constructive,
    Newton,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub residuals: Vec<Vec<f64>>,
    pub min_residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShadowResult {
    pub z: TorusPoint,
    /// errors[i][j] = d(f^{s_k + j} z, f^j x_k) for the i-th entry, j = 0..=n_k
    /// (only j = 0 for the last entry)
    pub errors: Vec<Vec<f64>>,
    pub constant: f64,
    pub lambda: f64,
    pub beta: f64,
    pub envelope_pass: bool,
    pub envelope_min_residual: f64,
    pub solver: Solver,
    pub m_used: usize,
    /// successive distances between z_m and z_{m-1} (constructive only)
    pub gaps: Vec<f64>,
    /// largest one-step defect of the computed orbit, in offsets
    pub orbit_defect: f64,
    pub iterations: usize,
}

impl ShadowResult {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Residuals C beta e^{-lambda min(j, n_k - j)} - errors[k][j].
pub fn verify_envelope(errors: &[Vec<f64>], steps: &[usize], c: f64, beta: f64, lambda: f64) -> EnvelopeReport {
    let mut min_residual = f64::INFINITY;
    let residuals: Vec<Vec<f64>> = errors
        .iter()
        .zip(steps)
        .map(|(row, &n)| {
            row.iter()
                .enumerate()
                .map(|(j, e)| {
                    let d = j.min(n.saturating_sub(j)) as f64;
                    let r = c * beta * (-lambda * d).exp() - e;
                    min_residual = min_residual.min(r);
                    r
                })
                .collect()
        })
        .collect();
    EnvelopeReport {
        residuals,
        min_residual,
        pass: min_residual >= -ENVELOPE_TOL,
    }
}

/// Error profile from the offsets delta_i of the shadowing orbit relative to
/// the anchors.
fn profile(exp: &Expanded, steps: &[usize], delta: &[Vec2]) -> Vec<Vec<f64>> {
    let m = exp.starts.len();
    (0..m)
        .map(|i| {
            let s0 = exp.starts[i];
            if i + 1 == m {
                return vec![delta[s0].norm()];
            }
            let n = steps[i];
            let mut row: Vec<f64> = (0..n).map(|j| delta[s0 + j].norm()).collect();
            let g = s0 + n - 1;
            row.push((delta[g + 1] - exp.defects[g]).norm());
            row
        })
        .collect()
}

fn orbit_defect(map: &dyn DiscreteMap, exp: &Expanded, delta: &[Vec2]) -> f64 {
    (0..exp.defects.len())
        .map(|i| (exp.defects[i] + map.forward_difference(&exp.anchors[i], &delta[i]) - delta[i + 1]).norm())
        .fold(0.0, f64::max)
}

fn zero_index(po: &PseudoOrbit) -> Result<usize> {
    po.index(0)
        .ok_or_else(|| Error::Precondition(format!("window [{}, {}] does not contain k = 0", po.k_min, po.k_max())))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    po: &PseudoOrbit,
    map: &dyn DiscreteMap,
    exp: &Expanded,
    delta: &[Vec2],
    z: TorusPoint,
    c: f64,
    lambda: f64,
    solver: Solver,
    m_used: usize,
    gaps: Vec<f64>,
    iterations: usize,
) -> ShadowResult {
    let errors = profile(exp, &po.steps, delta);
    let env = verify_envelope(&errors, &po.steps, c, po.beta, lambda);
    ShadowResult {
        z,
        errors,
        constant: c,
        lambda,
        beta: po.beta,
        envelope_pass: env.pass,
        envelope_min_residual: env.min_residual,
        solver,
        m_used,
        gaps,
        orbit_defect: orbit_defect(map, exp, delta),
        iterations,
    }
}

// ---------------------------------------------------------------------------
// constructive solver

#[derive(Clone, Debug)]
pub struct ConstructiveConfig {
    pub degree: usize,
    pub cauchy_tol: f64,
    pub m_max: Option<usize>,
    /// enforce n_k >= N2 and beta <= beta0
    pub check_preconditions: bool,
}

impl Default for ConstructiveConfig {
    fn default() -> Self {
        ConstructiveConfig {
            degree: DEFAULT_DEGREE,
            cauchy_tol: 1e-13,
            m_max: None,
            check_preconditions: true,
        }
    }
}

struct Chains<'a> {
    map: &'a dyn DiscreteMap,
    s: &'a dyn Splitting,
    anchors: &'a [TorusPoint],
    radius: f64,
    degree: usize,
    h1: f64,
}

impl Chains<'_> {
    fn check(&self, d: &AdmissibleDisk) -> Result<()> {
        let off = d.offset();
        if off > self.h1 {
            return Err(Error::Precondition(format!(
                "admissibility offset {off:e} exceeds h1 = {:e}",
                self.h1
            )));
        }
        Ok(())
    }

    /// F-disks at anchors bottom..=top, pulled back from a straight disk at top.
    fn f_chain(&self, bottom: usize, top: usize) -> Result<Vec<AdmissibleDisk>> {
        let mut out = vec![AdmissibleDisk::along_bundle(self.s, self.anchors[top], F, self.radius, self.degree)];
        for i in (bottom..top).rev() {
            let d = backward_graph_step(self.map, self.s, out.last().unwrap(), &self.anchors[i], self.radius, self.degree)?;
            self.check(&d)?;
            out.push(d);
        }
        out.reverse();
        Ok(out)
    }

    /// E-disks at anchors bottom..=top, pushed forward from a straight disk at bottom.
    fn e_chain(&self, bottom: usize, top: usize) -> Result<Vec<AdmissibleDisk>> {
        let rev = Reversed(self.map);
        let sw = Swapped(self.s);
        let mut out = vec![AdmissibleDisk::along_bundle(&sw, self.anchors[bottom], F, self.radius, self.degree)];
        for i in bottom + 1..=top {
            let d = backward_graph_step(&rev, &sw, out.last().unwrap(), &self.anchors[i], self.radius, self.degree)?;
            self.check(&d)?;
            out.push(d);
        }
        Ok(out)
    }

    /// E-chain on [bottom, e_top] and F-chain on [f_bottom, top], built in parallel.
    fn both(&self, bottom: usize, e_top: usize, f_bottom: usize, top: usize) -> Result<(Vec<AdmissibleDisk>, Vec<AdmissibleDisk>)> {
        let (e, f) = rayon::join(|| self.e_chain(bottom, e_top), || self.f_chain(f_bottom, top));
        Ok((e?, f?))
    }
}

/// Offset of the intersection of an E-disk and an F-disk centred at the same anchor.
fn meet(e: &AdmissibleDisk, f: &AdmissibleDisk) -> Result<Vec2> {
    let x = intersect_disks(e, f)?;
    Ok(e.offset_vec(x.params.0))
}

pub fn shadow_constructive(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    po: &PseudoOrbit,
    consts: &ShadowConstants,
    cfg: &ConstructiveConfig,
) -> Result<ShadowResult> {
    let i0 = zero_index(po)?;
    if cfg.check_preconditions {
        if po.beta > consts.beta0 {
            return Err(Error::Precondition(format!(
                "beta {:e} above beta0 = {:e}",
                po.beta, consts.beta0
            )));
        }
        if let Some(&n) = po.steps[..po.len() - 1].iter().find(|&&n| n < consts.n2) {
            return Err(Error::Precondition(format!("return time {n} below N2 = {}", consts.n2)));
        }
    }
    po.check_jumps(map)?;
    let exp = po.expand(map);
    let chains = Chains {
        map,
        s,
        anchors: &exp.anchors,
        radius: consts.disk_radius(),
        degree: cfg.degree,
        h1: consts.h1,
    };
    let reach = i0.min(po.len() - 1 - i0);
    let m_max = cfg.m_max.unwrap_or(reach).min(reach);
    let mid = exp.starts[i0];
    let mut gaps = Vec::new();
    let mut prev: Option<Vec2> = None;
    let mut m_used = 0;
    for m in 1..=m_max {
        let (e, f) = chains.both(exp.starts[i0 - m], mid, mid, exp.starts[i0 + m])?;
        let z = meet(e.last().unwrap(), &f[0])?;
        m_used = m;
        if let Some(p) = prev {
            let g = (z - p).norm();
            gaps.push(g);
            if g < cfg.cauchy_tol {
                break;
            }
        }
        prev = Some(z);
    }
    if m_max >= 2 && gaps.last().is_none_or(|&g| g >= cfg.cauchy_tol) {
        return Err(Error::Solver(format!(
            "Cauchy stall: last gap {:e} after m = {m_max}",
            gaps.last().copied().unwrap_or(f64::NAN)
        )));
    }
    // full window: the intersections at every anchor are the orbit of z
    let last = exp.anchors.len() - 1;
    let (e_full, f_full) = chains.both(0, last, 0, last)?;
    let delta: Vec<Vec2> = (0..=last)
        .map(|i| meet(&e_full[i], &f_full[i]))
        .collect::<Result<_>>()?;
    let z = if m_max == 0 {
        exp.anchors[mid].offset(delta[mid])
    } else {
        exp.anchors[mid].offset(prev.unwrap_or(delta[mid]))
    };
    Ok(finish(
        po,
        map,
        &exp,
        &delta,
        z,
        consts.c1,
        consts.lambda,
        Solver::Constructive,
        m_used,
        gaps,
        0,
    ))
}

// ---------------------------------------------------------------------------
// Newton oracle

#[derive(Clone, Debug)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// cap on the expanded length L
    pub cap: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-15,
            max_iter: NEWTON_MAX_ITER,
            cap: 1_000_000,
        }
    }
}

fn residuals(map: &dyn DiscreteMap, exp: &Expanded, delta: &[Vec2]) -> Vec<Vec2> {
    (0..exp.defects.len())
        .map(|i| exp.defects[i] + map.forward_difference(&exp.anchors[i], &delta[i]) - delta[i + 1])
        .collect()
}

fn norm2(r: &[Vec2]) -> f64 {
    r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

fn max_norm(r: &[Vec2]) -> f64 {
    r.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Minimum-norm Newton step for the free-boundary system R_i = 0, i < L,
/// unknowns delta_0..delta_L: solve (J J^T) y = -R by block Thomas, then
/// Delta = J^T y.
fn min_norm_step(jac: &[Mat2], r: &[Vec2]) -> Result<Vec<Vec2>> {
    let l = r.len();
    // diagonal blocks D_i D_i^T + I, lower blocks -D_{i+1} at (i+1, i)
    let mut cp: Vec<Mat2> = Vec::with_capacity(l);
    let mut dp: Vec<Vec2> = Vec::with_capacity(l);
    for i in 0..l {
        let a = jac[i] * jac[i].transpose() + Mat2::identity();
        let (a, rhs) = if i == 0 {
            (a, -r[0])
        } else {
            let low = -jac[i];
            // upper block of the previous row is -D_i^T
            (a - low * cp[i - 1], -r[i] - low * dp[i - 1])
        };
        let inv = a
            .try_inverse()
            .ok_or_else(|| Error::Solver("singular linearization".into()))?;
        let up = if i + 1 < l { -jac[i + 1].transpose() } else { Mat2::zeros() };
        cp.push(inv * up);
        dp.push(inv * rhs);
    }
    let mut y = vec![Vec2::zeros(); l];
    for i in (0..l).rev() {
        y[i] = if i + 1 < l { dp[i] - cp[i] * y[i + 1] } else { dp[i] };
    }
    let mut step = Vec::with_capacity(l + 1);
    for i in 0..=l {
        let mut d = Vec2::zeros();
        if i < l {
            d += jac[i].transpose() * y[i];
        }
        if i > 0 {
            d -= y[i - 1];
        }
        step.push(d);
    }
    Ok(step)
}

/// Damped Newton on the stacked orbit residual with free boundary, seeded at
/// the pseudo-orbit itself.
/// Minimum-norm Newton solve for offsets of a true orbit from the expanded
/// anchors.
pub(crate) fn newton_offsets(map: &dyn DiscreteMap, exp: &Expanded, cfg: &NewtonConfig) -> Result<(Vec<Vec2>, usize)> {
    let mut delta = vec![Vec2::zeros(); exp.anchors.len()];
    let mut r = residuals(map, exp, &delta);
    let mut rn = norm2(&r);
    let mut iterations = 0;
    while max_norm(&r) > cfg.tol && iterations < cfg.max_iter {
        iterations += 1;
        let jac: Vec<Mat2> = (0..r.len())
            .map(|i| map.derivative(&exp.anchors[i].offset(delta[i])))
            .collect();
        let step = min_norm_step(&jac, &r)?;
        let mut h = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Vec2> = delta.iter().zip(&step).map(|(d, s)| d + s * h).collect();
            let tr = residuals(map, exp, &trial);
            let tn = norm2(&tr);
            if tn < rn || tn == 0.0 {
                delta = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            h *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if max_norm(&r) > 1e-12 {
        return Err(Error::Solver(format!(
            "Newton divergence: residual {:e} after {iterations} iterations",
            max_norm(&r)
        )));
    }
    Ok((delta, iterations))
}

pub fn shadow_newton(
    map: &dyn DiscreteMap,
    po: &PseudoOrbit,
    c: f64,
    lambda: f64,
    cfg: &NewtonConfig,
) -> Result<ShadowResult> {
    let i0 = zero_index(po)?;
    let total = po.total_length();
    if total > cfg.cap {
        return Err(Error::OrbitCap {
            requested: total,
            cap: cfg.cap,
        });
    }
    let exp = po.expand(map);
    let mid = exp.starts[i0];
    let (delta, iterations) = newton_offsets(map, &exp, cfg)?;
    let z = exp.anchors[mid].offset(delta[mid]);
    Ok(finish(po, map, &exp, &delta, z, c, lambda, Solver::Newton, 0, Vec::new(), iterations))
}

// ---------------------------------------------------------------------------
// periodic orbits

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicCertificate {
    pub p: TorusPoint,
    pub period: usize,
    /// largest one-step defect of the polished periodic orbit
    pub residual: f64,
    /// d(f^{n0}(p), p) by direct iteration
    pub single_shot: f64,
    /// log of the restricted norms of Df^{n0} on E and F at p
    pub floquet: [f64; 2],
    /// min(floquet_E, -floquet_F) / n0
    pub lambda: f64,
    pub lambda_required: Option<f64>,
    pub bounds_pass: bool,
    pub orbit: Vec<TorusPoint>,
    pub iterations: usize,
    pub seed_source: String,
}

/// Cyclic multiple-shooting Newton for a periodic orbit through the anchors
/// P_0..P_{n-1}. Returns the offsets, iterations and final defect.
pub(crate) fn periodic_newton(map: &dyn DiscreteMap, anchors: &[TorusPoint], tol: f64, max_iter: usize) -> Result<(Vec<Vec2>, usize, f64)> {
    let n = anchors.len();
    let defects: Vec<Vec2> = (0..n)
        .map(|i| anchors[(i + 1) % n].displacement_to(&map.forward(&anchors[i])))
        .collect();
    let res = |delta: &[Vec2]| -> Vec<Vec2> {
        (0..n)
            .map(|i| defects[i] + map.forward_difference(&anchors[i], &delta[i]) - delta[(i + 1) % n])
            .collect()
    };
    let mut delta = vec![Vec2::zeros(); n];
    let mut r = res(&delta);
    let mut rn = norm2(&r);
    let mut iterations = 0;
    while max_norm(&r) > tol && iterations < max_iter {
        iterations += 1;
        let mut j = DMatrix::<f64>::zeros(2 * n, 2 * n);
        let mut rhs = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            let d = map.derivative(&anchors[i].offset(delta[i]));
            let nx = (i + 1) % n;
            for a in 0..2 {
                for b in 0..2 {
                    j[(2 * i + a, 2 * i + b)] += d[(a, b)];
                }
                j[(2 * i + a, 2 * nx + a)] -= 1.0;
                rhs[2 * i + a] = -r[i][a];
            }
        }
        let step = j
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular periodic linearization".into()))?;
        let mut h = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<Vec2> = (0..n)
                .map(|i| delta[i] + Vec2::new(step[2 * i], step[2 * i + 1]) * h)
                .collect();
            let tr = res(&trial);
            let tn = norm2(&tr);
            if tn < rn || tn == 0.0 {
                delta = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            h *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let defect = max_norm(&r);
    if defect > 1e-10 {
        return Err(Error::Solver(format!(
            "periodic polish diverged: defect {defect:e} after {iterations} iterations"
        )));
    }
    Ok((delta, iterations, defect))
}

fn orbit_points(map: &dyn DiscreteMap, x: &TorusPoint, n: usize) -> Vec<TorusPoint> {
    let mut out = Vec::with_capacity(n);
    let mut p = *x;
    for _ in 0..n {
        out.push(p);
        p = map.forward(&p);
    }
    out
}

/// Periodic point of period n0 found by multiple shooting from the orbit of `seed`.
pub fn periodic_point_near(map: &dyn DiscreteMap, seed: &TorusPoint, n0: usize, tol: f64) -> Result<(TorusPoint, Vec<TorusPoint>)> {
    if n0 == 0 {
        return Err(Error::Precondition("period must be positive".into()));
    }
    let anchors = orbit_points(map, seed, n0);
    let (delta, _, _) = periodic_newton(map, &anchors, tol, NEWTON_MAX_ITER)?;
    let orbit: Vec<TorusPoint> = anchors.iter().zip(&delta).map(|(a, d)| a.offset(*d)).collect();
    Ok((orbit[0], orbit))
}

/// Restricted log norms of Df^{n} on E and F along a periodic orbit, in precise frames.
pub fn floquet_logs(map: &dyn DiscreteMap, s: &dyn Splitting, orbit: &[TorusPoint]) -> Result<[f64; 2]> {
    let n = orbit.len();
    let frames: Vec<[Vec2; 2]> = orbit
        .iter()
        .map(|p| [s.frame_precise(E, p), s.frame_precise(F, p)])
        .collect();
    let mut out = [0.0; 2];
    for i in 0..n {
        let jac = map.derivative(&orbit[i]);
        for (b, o) in out.iter_mut().enumerate() {
            *o += step_log_factor(&jac, &frames[i], &frames[(i + 1) % n], b, &orbit[i])?;
        }
    }
    Ok(out)
}

/// Shadow the periodic chain, polish f^{n0}(z) = z by cyclic Newton, and
/// certify hyperbolicity. `consts` enables the constructive seed and the
/// theorem's lambda bound.
pub fn close_periodic(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    po: &PseudoOrbit,
    consts: Option<&ShadowConstants>,
    polish_tol: f64,
) -> Result<PeriodicCertificate> {
    if !po.periodic {
        return Err(Error::Precondition("pseudo-orbit is not periodic".into()));
    }
    let (x0, n0) = (po.points[0], po.steps[0]);
    if po.points.iter().any(|p| *p != x0) || po.steps.iter().any(|&n| n != n0) {
        return Err(Error::Precondition("periodic pseudo-orbit needs x_k = x0 and n_k = n0".into()));
    }
    let mut seed = x0;
    let mut seed_source = "pseudo-orbit".to_string();
    if let Some(c) = consts {
        let chain = PseudoOrbit::periodic_chain(x0, n0, 2, po.beta, po.block_level)?.with_measured_beta(map);
        let chain = PseudoOrbit { beta: chain.measured_beta(map), ..chain };
        let cfg = ConstructiveConfig {
            check_preconditions: true,
            ..Default::default()
        };
        if let Ok(res) = shadow_constructive(map, s, &chain, c, &cfg) {
            seed = res.z;
            seed_source = "constructive".to_string();
        }
    }
    let anchors = orbit_points(map, &seed, n0);
    let (delta, iterations, residual) = periodic_newton(map, &anchors, polish_tol, NEWTON_MAX_ITER)?;
    let orbit: Vec<TorusPoint> = anchors.iter().zip(&delta).map(|(a, d)| a.offset(*d)).collect();
    let p = orbit[0];
    let single_shot = orbit_points(map, &p, n0 + 1)[n0].distance(&p);
    let floquet = floquet_logs(map, s, &orbit)?;
    let lambda = floquet[E].min(-floquet[F]) / n0 as f64;
    if lambda <= 0.0 {
        return Err(Error::Verification(format!("hyperbolicity margin {lambda} is not positive")));
    }
    let lambda_required = consts.map(|c| c.lambda);
    let bounds_pass = lambda_required.is_none_or(|l| {
        floquet[E] >= l * n0 as f64 && floquet[F] <= -l * n0 as f64
    });
    Ok(PeriodicCertificate {
        p,
        period: n0,
        residual,
        single_shot,
        floquet,
        lambda,
        lambda_required,
        bounds_pass,
        orbit,
        iterations,
        seed_source,
    })
}

/// A point x = p + eta u near the periodic point p, u along E, with
/// d(f^{n0}(x), x) = gap.
pub fn recurrence_with_gap(map: &dyn DiscreteMap, s: &dyn Splitting, p: &TorusPoint, n0: usize, gap: f64) -> Result<TorusPoint> {
    if !(gap > 0.0) || n0 == 0 {
        return Err(Error::Precondition("need gap > 0 and n0 >= 1".into()));
    }
    let u = s.frame_precise(E, p).normalize();
    let orbit = orbit_points(map, p, n0 + 1);
    let closing = p.displacement_to(&orbit[n0]);
    let miss = |eta: f64| -> f64 {
        let mut d = u * eta;
        for q in &orbit[..n0] {
            d = map.forward_difference(q, &d);
        }
        (closing + d - u * eta).norm()
    };
    let mut eta = gap * 1e-3;
    for _ in 0..60 {
        let g = miss(eta);
        if g == 0.0 {
            break;
        }
        let next = eta * gap / g;
        if ((next - eta) / eta).abs() < 1e-14 {
            eta = next;
            break;
        }
        eta = next;
    }
    if ((miss(eta) - gap) / gap).abs() > 1e-6 {
        return Err(Error::Solver("could not reach the requested recurrence gap".into()));
    }
    Ok(p.offset(u * eta))
}

// ---------------------------------------------------------------------------
// lifting to f^N

/// The N images f^i(block of f^N) as separate clouds.
pub struct PhaseIndex {
    pub n: usize,
    clouds: Vec<CloudIndex>,
}

impl PhaseIndex {
    /// Component i holds the orbit points of f with indices N j + i, for the
    /// g-times j in `g_indices`.
    pub fn from_orbit(seg: &OrbitSegment, g_indices: &[usize], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("N must be positive".into()));
        }
        let clouds: Vec<CloudIndex> = (0..n)
            .map(|i| {
                CloudIndex::new(
                    g_indices
                        .iter()
                        .map(|&j| n * j + i)
                        .filter(|&k| k < seg.points.len())
                        .map(|k| seg.points[k])
                        .collect(),
                )
            })
            .collect();
        if clouds.iter().any(|c| c.is_empty()) {
            return Err(Error::Precondition("empty block component".into()));
        }
        Ok(PhaseIndex { n, clouds })
    }

    /// Index of the nearest component. Rejected when the nearest points of two
    /// components are within beta of each other.
    pub fn phase(&self, x: &TorusPoint, beta: f64) -> Result<usize> {
        if self.n == 1 {
            return Ok(0);
        }
        let mut near: Vec<(usize, f64, TorusPoint)> = self
            .clouds
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.nearest(x).map(|(j, d)| (i, d, c.points()[j])))
            .collect();
        near.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, second) = (&near[0], &near[1]);
        let sep = best.2.distance(&second.2);
        if sep <= beta {
            return Err(Error::Precondition(format!(
                "ambiguous phase: components {} and {} are {sep:e} apart",
                best.0, second.0
            )));
        }
        Ok(best.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftedOrbit {
    pub orbit: PseudoOrbit,
    /// phases[i] is the phase of the i-th point (p_{k-1}); the last entry is
    /// the phase of f^{n_K}(x_K)
    pub phases: Vec<usize>,
    pub n: usize,
    pub measured_beta: f64,
}

/// Lift with given phases: x^_k = f^{-p_{k-1}}(x_k), n^_k = (n_k - p_k + p_{k-1}) / N,
/// declared jump bound beta ||Df^{-1}||^N.
pub fn lift_with_phases(map: &dyn DiscreteMap, po: &PseudoOrbit, n: usize, phases: &[usize]) -> Result<LiftedOrbit> {
    if n == 0 || phases.len() != po.len() + 1 || phases.iter().any(|&p| p >= n) {
        return Err(Error::Precondition("phases must be N+1 values in [0, N)".into()));
    }
    let mut points = Vec::with_capacity(po.len());
    let mut steps = Vec::with_capacity(po.len());
    for i in 0..po.len() {
        let k = po.k_min + i as i64;
        let value = po.steps[i] as i64 - phases[i + 1] as i64 + phases[i] as i64;
        if value <= 0 || value % n as i64 != 0 {
            return Err(Error::Divisibility { k, value, n });
        }
        points.push((0..phases[i]).fold(po.points[i], |p, _| map.inverse(&p)));
        steps.push((value / n as i64) as usize);
    }
    let beta = po.beta * map.inverse_derivative_bound().powi(n as i32);
    let orbit = PseudoOrbit::new(po.k_min, points, steps, beta, po.block_level, po.periodic)?;
    let g = crate::systems::PowerMap { base: map, n };
    let measured_beta = orbit.measured_beta(&g);
    Ok(LiftedOrbit {
        orbit,
        phases: phases.to_vec(),
        n,
        measured_beta,
    })
}

/// Lift with phases read off the block components.
pub fn lift_pseudo_orbit(map: &dyn DiscreteMap, po: &PseudoOrbit, index: &PhaseIndex) -> Result<LiftedOrbit> {
    let mut phases = Vec::with_capacity(po.len() + 1);
    for x in &po.points {
        phases.push(index.phase(x, po.beta)?);
    }
    let last = po.points[po.len() - 1];
    let img = (0..po.steps[po.len() - 1]).fold(last, |p, _| map.forward(&p));
    phases.push(index.phase(&img, po.beta)?);
    lift_with_phases(map, po, index.n, &phases)
}

/// C2 = C1 ||Df||^N e^{lambda N} and C^ = C2 ||Df||^N e^{lambda N}.
pub fn lifted_constants(c1: f64, lambda: f64, df_bound: f64, n: usize) -> (f64, f64) {
    let k = df_bound.powi(n as i32) * (lambda * n as f64).exp();
    (c1 * k, c1 * k * k)
}

/// z = f^{p}(z^) for a shadow point of the lifted orbit, written as an offset
/// from f^{p}(anchor) where z^ = anchor + offset.
pub fn unlift(map: &dyn DiscreteMap, anchor: &TorusPoint, offset: Vec2, p: usize) -> (TorusPoint, Vec2) {
    let (mut a, mut d) = (*anchor, offset);
    for _ in 0..p {
        d = map.forward_difference(&a, &d);
        a = map.forward(&a);
    }
    (a, d)
}

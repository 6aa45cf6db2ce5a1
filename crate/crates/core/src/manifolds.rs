//! Cone fields, admissible disks stored as graphs over a bundle fiber, graph
//! transforms along orbit segments and local stable/unstable manifolds.

use std::borrow::Cow;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Exponents;
use crate::cocycle::{cocycle_stats, orbit, OrbitSegment};
use crate::error::{Error, Result};
use crate::systems::{sin_angle, DiscreteMap, Mat2, Reversed, Splitting, Swapped, TorusPoint, Vec2, E, F};

pub const DEFAULT_DEGREE: usize = 16;
pub const MAX_CHART_RADIUS: f64 = 0.1;
const NODE_NEWTON_ITER: usize = 50;
const SIMPSON_PANELS: usize = 64;
const OVERSAMPLE: usize = 4;

fn unit(v: Vec2) -> Vec2 {
    v / v.norm()
}

/// Oblique coordinates (a, b) of `v = a e + b f`.
pub fn frame_coords(v: &Vec2, e: &Vec2, f: &Vec2) -> Result<(f64, f64)> {
    let m = Mat2::from_columns(&[*e, *f]);
    let c = m
        .try_inverse()
        .ok_or(Error::Precondition("degenerate frame pair".into()))?
        * v;
    Ok((c[0], c[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeMembership {
    pub member: bool,
    /// theta |v_base| - |v_comp|.
    pub margin: f64,
}

/// Membership of `v` in the cone of width `theta` around bundle `base` at `x`.
pub fn cone_membership(
    s: &dyn Splitting,
    x: &TorusPoint,
    v: &Vec2,
    base: usize,
    theta: f64,
) -> Result<ConeMembership> {
    if v.norm() == 0.0 {
        return Err(Error::ZeroVector);
    }
    let e = unit(s.frame_precise(E, x));
    let f = unit(s.frame_precise(F, x));
    let (a, b) = frame_coords(v, &e, &f)?;
    let (vb, vc) = if base == F { (b, a) } else { (a, b) };
    let margin = theta * vb.abs() - vc.abs();
    Ok(ConeMembership {
        member: margin >= 0.0,
        margin,
    })
}

/// eta1 = e^{chi_F - chi_E + 2 eps} and eta2 = eta1 e^{eps}.
pub fn cone_rates(exps: &Exponents, epsilon: f64) -> (f64, f64) {
    let eta1 = (exps.chi_f - exps.chi_e + 2.0 * epsilon).exp();
    (eta1, eta1 * epsilon.exp())
}

/// Polynomial graph on [lo, hi] stored by its values at Chebyshev points of
/// the second kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChebGraph {
    pub lo: f64,
    pub hi: f64,
    pub values: Vec<f64>,
    deriv: Vec<f64>,
}

const CACHED_DEGREES: usize = 65;
static NODE_CACHE: [OnceLock<Vec<f64>>; CACHED_DEGREES] = [const { OnceLock::new() }; CACHED_DEGREES];

fn compute_unit_nodes(degree: usize) -> Vec<f64> {
    if degree == 0 {
        return vec![0.0];
    }
    (0..=degree)
        .map(|j| (std::f64::consts::PI * j as f64 / degree as f64).cos())
        .collect()
}

fn cheb_unit_nodes(degree: usize) -> Cow<'static, [f64]> {
    match NODE_CACHE.get(degree) {
        Some(cell) => Cow::Borrowed(cell.get_or_init(|| compute_unit_nodes(degree))),
        None => Cow::Owned(compute_unit_nodes(degree)),
    }
}

fn cheb_weight(j: usize, degree: usize) -> f64 {
    let w = if j % 2 == 0 { 1.0 } else { -1.0 };
    if j == 0 || j == degree {
        0.5 * w
    } else {
        w
    }
}

impl ChebGraph {
    pub fn nodes(lo: f64, hi: f64, degree: usize) -> Vec<f64> {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        cheb_unit_nodes(degree).iter().map(|x| mid + half * x).collect()
    }

    pub fn from_values(lo: f64, hi: f64, values: Vec<f64>) -> Self {
        let mut g = ChebGraph {
            lo,
            hi,
            values,
            deriv: Vec::new(),
        };
        g.deriv = g.differentiate(&g.values);
        g
    }

    pub fn from_fn<G: FnMut(f64) -> f64>(lo: f64, hi: f64, degree: usize, f: G) -> Self {
        let vals = Self::nodes(lo, hi, degree).into_iter().map(f).collect();
        Self::from_values(lo, hi, vals)
    }

    pub fn degree(&self) -> usize {
        self.values.len() - 1
    }

    fn half(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.hi > self.lo) || self.values.len() < 2
    }

    fn differentiate(&self, v: &[f64]) -> Vec<f64> {
        if self.is_degenerate() {
            return vec![0.0; v.len()];
        }
        let n = self.degree();
        let xs = cheb_unit_nodes(n);
        let h = self.half();
        (0..=n)
            .map(|i| {
                let wi = cheb_weight(i, n);
                let mut acc = 0.0;
                for j in 0..=n {
                    if j != i {
                        acc += cheb_weight(j, n) / wi / (xs[i] - xs[j]) * (v[j] - v[i]);
                    }
                }
                acc / h
            })
            .collect()
    }

    fn interpolate(&self, vals: &[f64], s: f64) -> f64 {
        if self.is_degenerate() {
            return vals[0];
        }
        let n = self.degree();
        let x = (s - 0.5 * (self.lo + self.hi)) / self.half();
        let xs = cheb_unit_nodes(n);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..=n {
            let d = x - xs[j];
            if d == 0.0 {
                return vals[j];
            }
            let w = cheb_weight(j, n) / d;
            num += w * vals[j];
            den += w;
        }
        num / den
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.interpolate(&self.values, s)
    }

    pub fn deriv(&self, s: f64) -> f64 {
        self.interpolate(&self.deriv, s)
    }

    pub fn second_deriv(&self, s: f64) -> f64 {
        let d2 = self.differentiate(&self.deriv);
        self.interpolate(&d2, s)
    }

    /// max |g'| on an oversampled uniform grid plus max |g''| times half the
    /// grid spacing.
    pub fn slope_certificate(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let m = OVERSAMPLE * (self.degree() + 1);
        let h = (self.hi - self.lo) / m as f64;
        let d2 = self.differentiate(&self.deriv);
        let mut s1: f64 = 0.0;
        let mut s2: f64 = 0.0;
        for i in 0..=m {
            let u = self.lo + h * i as f64;
            s1 = s1.max(self.interpolate(&self.deriv, u).abs());
            s2 = s2.max(self.interpolate(&d2, u).abs());
        }
        s1 + 0.5 * h * s2
    }

    pub fn max_sampled_slope(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let m = OVERSAMPLE * (self.degree() + 1);
        (0..=m)
            .map(|i| self.deriv(self.lo + (self.hi - self.lo) * i as f64 / m as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// A curve through a chart at `center`: u -> center + u b + g(u) c.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibleDisk {
    pub center: TorusPoint,
    pub base_bundle: usize,
    pub base_dir: [f64; 2],
    pub comp_dir: [f64; 2],
    pub graph: ChebGraph,
    /// Declared intrinsic radius.
    pub radius: f64,
    /// Certified Lipschitz bound of the graph in chart coordinates.
    pub slope: f64,
    /// Declared cone width.
    pub theta: f64,
}

impl AdmissibleDisk {
    pub fn straight(
        center: TorusPoint,
        base_bundle: usize,
        base_dir: Vec2,
        comp_dir: Vec2,
        radius: f64,
        degree: usize,
    ) -> Self {
        let (lo, hi) = (-radius, radius);
        AdmissibleDisk {
            center,
            base_bundle,
            base_dir: unit(base_dir).into(),
            comp_dir: unit(comp_dir).into(),
            graph: ChebGraph::from_values(lo, hi, vec![0.0; degree + 1]),
            radius,
            slope: 0.0,
            theta: 0.0,
        }
    }

    /// Straight segment along the precise frame of `bundle` at `center`.
    pub fn along_bundle(
        s: &dyn Splitting,
        center: TorusPoint,
        bundle: usize,
        radius: f64,
        degree: usize,
    ) -> Self {
        let b = s.frame_precise(bundle, &center);
        let c = s.frame_precise(1 - bundle, &center);
        Self::straight(center, bundle, b, c, radius, degree)
    }

    pub fn b(&self) -> Vec2 {
        Vec2::new(self.base_dir[0], self.base_dir[1])
    }

    pub fn c(&self) -> Vec2 {
        Vec2::new(self.comp_dir[0], self.comp_dir[1])
    }

    fn chart_inverse(&self) -> Result<Mat2> {
        Mat2::from_columns(&[self.b(), self.c()])
            .try_inverse()
            .ok_or(Error::Precondition("degenerate chart frame".into()))
    }

    /// Displacement of the disk point with parameter u from the center.
    pub fn offset_vec(&self, u: f64) -> Vec2 {
        self.b() * u + self.c() * self.graph.eval(u)
    }

    pub fn point(&self, u: f64) -> TorusPoint {
        self.center.offset(self.offset_vec(u))
    }

    pub fn tangent(&self, u: f64) -> Vec2 {
        self.b() + self.c() * self.graph.deriv(u)
    }

    /// Chart coordinates (u, w) of a point near the center.
    pub fn chart_coords(&self, p: &TorusPoint) -> Result<(f64, f64)> {
        let d = self.chart_inverse()? * self.center.displacement_to(p);
        Ok((d[0], d[1]))
    }

    pub fn center_param(&self) -> f64 {
        0.0f64.clamp(self.graph.lo, self.graph.hi)
    }

    /// |g| at the center parameter: the offset h from the anchor.
    pub fn offset(&self) -> f64 {
        self.graph.eval(self.center_param()).abs()
    }

    pub fn arc_length(&self, a: f64, b: f64) -> f64 {
        if a == b || self.graph.is_degenerate() {
            return 0.0;
        }
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let h = (b - a) / SIMPSON_PANELS as f64;
        let speed = |u: f64| self.tangent(u).norm();
        let mut acc = speed(a) + speed(b);
        for i in 1..SIMPSON_PANELS {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * speed(a + h * i as f64);
        }
        acc * h / 3.0
    }

    /// Intrinsic distances from the center parameter to the two ends.
    pub fn extent(&self) -> (f64, f64) {
        let c = self.center_param();
        (self.arc_length(self.graph.lo, c), self.arc_length(c, self.graph.hi))
    }

    pub fn polyline(&self, n: usize) -> Vec<TorusPoint> {
        let n = n.max(1);
        (0..=n)
            .map(|i| self.point(self.graph.lo + (self.graph.hi - self.graph.lo) * i as f64 / n as f64))
            .collect()
    }

    /// |w - g(u)| for the chart coordinates of `p`, or None outside the domain.
    pub fn vertical_distance(&self, p: &TorusPoint) -> Result<Option<f64>> {
        let (u, w) = self.chart_coords(p)?;
        let tol = 1e-12 * (1.0 + self.graph.hi - self.graph.lo);
        if u < self.graph.lo - tol || u > self.graph.hi + tol {
            return Ok(None);
        }
        let u = u.clamp(self.graph.lo, self.graph.hi);
        Ok(Some((w - self.graph.eval(u)).abs()))
    }

    /// Largest cone width |v_comp| / |v_base| of the tangent, measured in the
    /// precise splitting frames at `samples + 1` points of the disk.
    pub fn cone_width(&self, s: &dyn Splitting, samples: usize) -> Result<f64> {
        let samples = samples.max(1);
        let mut w: f64 = 0.0;
        for i in 0..=samples {
            let u = self.graph.lo + (self.graph.hi - self.graph.lo) * i as f64 / samples as f64;
            let p = self.point(u);
            let e = unit(s.frame_precise(E, &p));
            let f = unit(s.frame_precise(F, &p));
            let (a, b) = frame_coords(&self.tangent(u), &e, &f)?;
            let (vb, vc) = if self.base_bundle == F { (b, a) } else { (a, b) };
            w = w.max(vc.abs() / vb.abs());
        }
        Ok(w)
    }

    /// Subdisk of intrinsic radius `radius` about the center parameter.
    pub fn restrict(&self, radius: f64) -> AdmissibleDisk {
        let (lo, hi) = self.clip_params(radius);
        let graph = if self.graph.is_degenerate() {
            self.graph.clone()
        } else {
            ChebGraph::from_fn(lo, hi, self.graph.degree(), |u| self.graph.eval(u))
        };
        let slope = graph.slope_certificate();
        AdmissibleDisk {
            graph,
            radius,
            slope,
            ..self.clone()
        }
    }

    fn clip_params(&self, radius: f64) -> (f64, f64) {
        let c = self.center_param();
        let solve = |end: f64| -> f64 {
            if self.arc_length(c, end) <= radius {
                return end;
            }
            let (mut a, mut b) = (c, end);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if self.arc_length(c, m) <= radius {
                    a = m;
                } else {
                    b = m;
                }
            }
            a
        };
        (solve(self.graph.lo), solve(self.graph.hi))
    }
}

struct NodeSolver<'a> {
    map: &'a dyn DiscreteMap,
    old: &'a AdmissibleDisk,
    old_inv: Mat2,
    anchor: TorusPoint,
    /// map(anchor) - old.center
    shift: Vec2,
    b: Vec2,
    c: Vec2,
}

impl NodeSolver<'_> {
    /// psi with map(anchor + s b + psi c) on the old disk.
    fn solve(&self, s: f64, guess: f64) -> Result<f64> {
        let mut psi = guess;
        let mut res = f64::INFINITY;
        let mut phi = 0.0;
        for _ in 0..NODE_NEWTON_ITER {
            let v = self.b * s + self.c * psi;
            let q = self.anchor.offset(v);
            let d = self.old_inv * (self.shift + self.map.forward_difference(&self.anchor, &v));
            phi = d[0];
            res = d[1] - self.old.graph.eval(phi);
            let jd = self.old_inv * (self.map.derivative(&q) * self.c);
            let dres = jd[1] - self.old.graph.deriv(phi) * jd[0];
            if dres.abs() < 1e-14 {
                return Err(Error::LeavesChart("graph tangent to the fiber".into()));
            }
            let step = res / dres;
            psi -= step;
            if step.abs() <= 1e-15 * (1.0 + psi.abs()) {
                res = 0.0;
                break;
            }
        }
        if res.abs() > 1e-12 {
            return Err(Error::LeavesChart(format!("node solve residual {res:e}")));
        }
        let g = &self.old.graph;
        let tol = 1e-9 * (1.0 + (g.hi - g.lo));
        if phi < g.lo - tol || phi > g.hi + tol {
            return Err(Error::LeavesChart(format!(
                "preimage parameter {phi:e} outside [{:e}, {:e}]",
                g.lo, g.hi
            )));
        }
        Ok(psi)
    }

    fn graph(&self, lo: f64, hi: f64, degree: usize, guess: f64) -> Result<ChebGraph> {
        let nodes = ChebGraph::nodes(lo, hi, degree);
        let mut vals = vec![0.0; nodes.len()];
        // start at the node closest to 0, continue outward with warm starts
        let start = (0..nodes.len())
            .min_by(|&a, &b| nodes[a].abs().total_cmp(&nodes[b].abs()))
            .unwrap_or(0);
        vals[start] = self.solve(nodes[start], guess)?;
        for i in (0..start).rev() {
            vals[i] = self.solve(nodes[i], vals[i + 1])?;
        }
        for i in start + 1..nodes.len() {
            vals[i] = self.solve(nodes[i], vals[i - 1])?;
        }
        Ok(ChebGraph::from_values(lo, hi, vals))
    }
}

/// One step of the backward graph transform: the part of map^{-1}(old) near
/// `anchor`, as a graph in the precise splitting frame at `anchor`, clipped to
/// intrinsic radius `r` about the parameter 0.
pub fn backward_graph_step(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    old: &AdmissibleDisk,
    anchor: &TorusPoint,
    r: f64,
    degree: usize,
) -> Result<AdmissibleDisk> {
    let base = old.base_bundle;
    let b = unit(s.frame_precise(base, anchor));
    let c = unit(s.frame_precise(1 - base, anchor));
    let new_inv = Mat2::from_columns(&[b, c])
        .try_inverse()
        .ok_or(Error::FrameDegenerate {
            x: anchor.coords[0],
            y: anchor.coords[1],
        })?;
    let back = anchor.displacement_to(&map.inverse(&old.center));
    let pre = |u: f64| new_inv * (back + map.inverse_difference(&old.center, &old.offset_vec(u)));
    let p_lo = pre(old.graph.lo);
    let p_hi = pre(old.graph.hi);
    let shell = |graph: ChebGraph| AdmissibleDisk {
        center: *anchor,
        base_bundle: base,
        base_dir: b.into(),
        comp_dir: c.into(),
        slope: graph.slope_certificate(),
        graph,
        radius: r,
        theta: old.theta,
    };
    if old.graph.is_degenerate() {
        let g = ChebGraph::from_values(p_lo[0], p_lo[0], vec![p_lo[1]; degree + 1]);
        return Ok(AdmissibleDisk {
            radius: 0.0,
            ..shell(g)
        });
    }
    let (a0, b0) = if p_lo[0] <= p_hi[0] {
        (p_lo[0], p_hi[0])
    } else {
        (p_hi[0], p_lo[0])
    };
    let (a1, b1) = (a0.max(-2.0 * r), b0.min(2.0 * r));
    if a1 > b1 {
        return Err(Error::RadiusCollapse { step: 0 });
    }
    let solver = NodeSolver {
        map,
        old,
        old_inv: old.chart_inverse()?,
        anchor: *anchor,
        shift: old.center.displacement_to(&map.forward(anchor)),
        b,
        c,
    };
    let guess = 0.5 * (p_lo[1] + p_hi[1]);
    let first = shell(solver.graph(a1, b1, degree, guess)?);
    let cp = first.center_param();
    if anchor.distance(&first.point(cp)) > r {
        return Err(Error::RadiusCollapse { step: 0 });
    }
    let (lo, hi) = first.clip_params(r);
    if lo == hi {
        let v = first.graph.eval(lo);
        return Ok(shell(ChebGraph::from_values(lo, hi, vec![v; degree + 1])));
    }
    Ok(shell(solver.graph(lo, hi, degree, first.graph.eval(cp))?))
}

pub struct PullResult {
    /// Subdisk of radius r / t at the start of the segment.
    pub disk: AdmissibleDisk,
    /// D_0, ..., D_n along the segment, each of radius r.
    pub chain: Vec<AdmissibleDisk>,
}

/// Pull `top` (a disk at the last point of `orbit`) back along the orbit.
pub fn pull_subdisk(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    orbit: &[TorusPoint],
    top: &AdmissibleDisk,
    r: f64,
    t: f64,
    degree: usize,
) -> Result<PullResult> {
    if orbit.is_empty() {
        return Err(Error::Precondition("empty orbit segment".into()));
    }
    let n = orbit.len() - 1;
    let mut chain = Vec::with_capacity(n + 1);
    chain.push(top.clone());
    for k in (0..n).rev() {
        let prev = chain.last().expect("nonempty");
        let d = backward_graph_step(map, s, prev, &orbit[k], r, degree).map_err(|e| match e {
            Error::RadiusCollapse { .. } => Error::RadiusCollapse { step: k },
            e => e,
        })?;
        chain.push(d);
    }
    chain.reverse();
    let disk = chain[0].restrict(r / t);
    Ok(PullResult { disk, chain })
}

/// Minimal slack of the forward block bounds along a segment starting at its
/// base point: F products at most t e^{(chi_F + eps) k}, E products at least
/// t^{-1} e^{(chi_E - eps) k}.
pub fn segment_hypotheses(
    seg: &OrbitSegment,
    s: &dyn Splitting,
    t: f64,
    epsilon: f64,
    exps: &Exponents,
) -> Result<f64> {
    let stats = cocycle_stats(seg, s)?;
    let lt = t.ln();
    let (mut sf, mut se) = (0.0, 0.0);
    let mut slack = f64::INFINITY;
    for k in 0..stats.steps() {
        sf += stats.log_norm[F][k];
        se += stats.log_conorm[E][k];
        let kf = (k + 1) as f64;
        slack = slack
            .min(lt + (exps.chi_f + epsilon) * kf - sf)
            .min(se - ((exps.chi_e - epsilon) * kf - lt));
    }
    if slack < -1e-10 {
        return Err(Error::Precondition(format!(
            "block bounds fail along the segment (slack {slack:e})"
        )));
    }
    Ok(slack)
}

/// C^0 + C^1 distance of two graphs in the same chart over their common domain.
pub fn c1_gap(a: &AdmissibleDisk, b: &AdmissibleDisk) -> f64 {
    let lo = a.graph.lo.max(b.graph.lo);
    let hi = a.graph.hi.min(b.graph.hi);
    if hi < lo {
        return f64::INFINITY;
    }
    let m = 64;
    let (mut g0, mut g1): (f64, f64) = (0.0, 0.0);
    for i in 0..=m {
        let u = lo + (hi - lo) * i as f64 / m as f64;
        g0 = g0.max((a.graph.eval(u) - b.graph.eval(u)).abs());
        g1 = g1.max((a.graph.deriv(u) - b.graph.deriv(u)).abs());
    }
    g0 + g1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionAudit {
    /// Per k: max over pairs of (1/k) log(d_k / d_0).
    pub rates: Vec<f64>,
    /// Per k: max over pairs of log(d_k / d_0) - log t - rate k.
    pub excess: Vec<f64>,
    pub pass: bool,
}

/// Track pairs of points of chain[0] along the chain. Each image is projected
/// back onto the next disk, which keeps the transverse error from growing.
pub fn contraction_audit(
    map: &dyn DiscreteMap,
    chain: &[AdmissibleDisk],
    pairs: &[(f64, f64)],
    k_max: usize,
    log_t: f64,
    rate: f64,
) -> Result<ContractionAudit> {
    let k_max = k_max.min(chain.len() - 1);
    let mut rates = vec![f64::NEG_INFINITY; k_max + 1];
    let mut excess = vec![f64::NEG_INFINITY; k_max + 1];
    let steps: Vec<(Vec2, Mat2)> = (1..=k_max)
        .map(|k| {
            let shift = chain[k].center.displacement_to(&map.forward(&chain[k - 1].center));
            Ok((shift, chain[k].chart_inverse()?))
        })
        .collect::<Result<_>>()?;
    for &(u1, u2) in pairs {
        let (mut a, mut b) = (u1, u2);
        let d0 = (chain[0].offset_vec(a) - chain[0].offset_vec(b)).norm();
        if d0 == 0.0 {
            continue;
        }
        for k in 1..=k_max {
            let (shift, inv) = &steps[k - 1];
            let prev = &chain[k - 1];
            a = (inv * (shift + map.forward_difference(&prev.center, &prev.offset_vec(a))))[0];
            b = (inv * (shift + map.forward_difference(&prev.center, &prev.offset_vec(b))))[0];
            let lr = ((chain[k].offset_vec(a) - chain[k].offset_vec(b)).norm() / d0).ln();
            rates[k] = rates[k].max(lr / k as f64);
            excess[k] = excess[k].max(lr - log_t - rate * k as f64);
        }
    }
    rates[0] = 0.0;
    excess[0] = -log_t;
    let pass = excess.iter().all(|e| *e <= 1e-10);
    Ok(ContractionAudit {
        rates,
        excess,
        pass,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub t: f64,
    pub epsilon: f64,
    pub exponents: Exponents,
    /// Chart radius r.
    pub radius: f64,
    pub degree: usize,
    /// Returns shorter than this are skipped.
    pub min_return: usize,
    pub j_max: usize,
    pub cauchy_tol: f64,
    pub audit_steps: usize,
    pub audit_pairs: usize,
    pub check_hypotheses: bool,
    pub seed: u64,
}

impl ManifoldConfig {
    pub fn new(t: f64, epsilon: f64, exponents: Exponents, radius: f64) -> Self {
        ManifoldConfig {
            t,
            epsilon,
            exponents,
            radius,
            degree: DEFAULT_DEGREE,
            min_return: 1,
            j_max: 40,
            cauchy_tol: 1e-12,
            audit_steps: 50,
            audit_pairs: 20,
            check_hypotheses: true,
            seed: 7,
        }
    }

    fn reversed(&self) -> Self {
        ManifoldConfig {
            exponents: Exponents {
                chi_e: -self.exponents.chi_f,
                chi_f: -self.exponents.chi_e,
            },
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldCertificate {
    pub contraction: ContractionAudit,
    /// Envelope t e^{(chi + 2 eps) k}: (log t, chi + 2 eps).
    pub envelope: (f64, f64),
    /// Sine of the angle between the disk and the target bundle at the center.
    pub tangency: f64,
    /// Last Cauchy gap.
    pub convergence: f64,
    pub gaps: Vec<f64>,
    pub returns_used: Vec<usize>,
    /// max over the chain of (distance to the anchor) - r.
    pub containment: f64,
    pub extent: (f64, f64),
    pub radius_pass: bool,
    pub hypothesis_slack: Option<f64>,
    /// Cone width along the audit chain, and the widening-law verdict.
    pub cone_widths: Vec<f64>,
    pub widening_pass: bool,
    pub audit_chain_len: usize,
}

fn sample_pairs(disk: &AdmissibleDisk, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (disk.graph.lo, disk.graph.hi);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = lo + (hi - lo) * rng.random::<f64>();
        let b = lo + (hi - lo) * rng.random::<f64>();
        if (a - b).abs() > 1e-3 * (hi - lo) {
            out.push((a, b));
        }
    }
    out
}

/// Local stable disk at `x`, pulled back from straight F segments at the
/// resonance returns `returns` (times n with g^n x in the block).
pub fn local_stable_manifold(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x: &TorusPoint,
    returns: &[usize],
    cfg: &ManifoldConfig,
) -> Result<(AdmissibleDisk, ManifoldCertificate)> {
    let r = cfg.radius;
    let rate = cfg.exponents.chi_f + 2.0 * cfg.epsilon;
    if r == 0.0 {
        let disk = AdmissibleDisk::along_bundle(s, *x, F, 0.0, cfg.degree);
        let cert = ManifoldCertificate {
            contraction: ContractionAudit {
                rates: vec![],
                excess: vec![],
                pass: true,
            },
            envelope: (cfg.t.ln(), rate),
            tangency: 0.0,
            convergence: 0.0,
            gaps: vec![],
            returns_used: vec![],
            containment: 0.0,
            extent: (0.0, 0.0),
            radius_pass: true,
            hypothesis_slack: None,
            cone_widths: vec![],
            widening_pass: true,
            audit_chain_len: 0,
        };
        return Ok((disk, cert));
    }
    let mut rets: Vec<usize> = returns.iter().copied().filter(|&n| n >= cfg.min_return).collect();
    rets.sort_unstable();
    rets.dedup();
    rets.truncate(cfg.j_max);
    if rets.len() < 2 {
        return Err(Error::Precondition(
            "need at least two resonance returns for the Cauchy rule".into(),
        ));
    }
    let n_max = rets[rets.len() - 1].max(cfg.audit_steps);
    let seg = orbit(map, x, n_max)?;
    let hypothesis_slack = if cfg.check_hypotheses {
        Some(segment_hypotheses(&seg, s, cfg.t, cfg.epsilon, &cfg.exponents)?)
    } else {
        None
    };
    let top_radius = 1.25 * r;
    let mut prev: Option<PullResult> = None;
    let mut gaps = Vec::new();
    let mut used = Vec::new();
    let mut converged = false;
    for &n in &rets {
        let top = AdmissibleDisk::along_bundle(s, seg.points[n], F, top_radius, cfg.degree);
        let pr = pull_subdisk(map, s, &seg.points[..=n], &top, r, cfg.t, cfg.degree)?;
        used.push(n);
        if let Some(p) = &prev {
            let gap = c1_gap(&p.chain[0], &pr.chain[0]);
            gaps.push(gap);
            if gap < cfg.cauchy_tol {
                prev = Some(pr);
                converged = true;
                break;
            }
        }
        prev = Some(pr);
    }
    if !converged {
        return Err(Error::Solver(format!("Cauchy rule not met; gaps {gaps:?}")));
    }
    let last = prev.expect("at least one iterate");
    let n_final = *used.last().expect("nonempty");
    let (chain, top_width) = if n_final >= cfg.audit_steps {
        let w = last.chain[n_final].cone_width(s, 8)?;
        (last.chain, w)
    } else {
        let top = AdmissibleDisk::along_bundle(s, seg.points[cfg.audit_steps], F, top_radius, cfg.degree);
        let w = top.cone_width(s, 8)?;
        let pr = pull_subdisk(map, s, &seg.points[..=cfg.audit_steps], &top, r, cfg.t, cfg.degree)?;
        (pr.chain, w)
    };
    let disk = last.disk;
    let pairs = sample_pairs(&disk, cfg.audit_pairs, cfg.seed);
    let k_audit = cfg.audit_steps.min(chain.len() - 1);
    let contraction = contraction_audit(map, &chain, &pairs, k_audit, cfg.t.ln(), rate)?;
    let containment = chain[..chain.len() - 1]
        .iter()
        .map(|d| {
            (0..=32)
                .map(|i| d.offset_vec(d.graph.lo + (d.graph.hi - d.graph.lo) * i as f64 / 32.0).norm())
                .fold(0.0, f64::max)
                - r
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let (_, eta2) = cone_rates(&cfg.exponents, cfg.epsilon);
    let nc = chain.len() - 1;
    let mut cone_widths = Vec::with_capacity(chain.len());
    let mut widening_pass = true;
    for (k, d) in chain.iter().enumerate() {
        let w = d.cone_width(s, 8)?;
        let bound = cfg.t * cfg.t * eta2.powi((nc - k) as i32) * top_width + 1e-8;
        widening_pass &= w <= bound;
        cone_widths.push(w);
    }
    let extent = disk.extent();
    let want = r / cfg.t * (1.0 - 1e-9);
    let tangency = sin_angle(&disk.tangent(disk.center_param()), &s.frame_precise(F, x));
    let cert = ManifoldCertificate {
        contraction,
        envelope: (cfg.t.ln(), rate),
        tangency,
        convergence: *gaps.last().unwrap_or(&0.0),
        gaps,
        returns_used: used,
        containment,
        radius_pass: extent.0 >= want && extent.1 >= want,
        extent,
        hypothesis_slack,
        cone_widths,
        widening_pass,
        audit_chain_len: nc,
    };
    Ok((disk, cert))
}

/// Local unstable disk at `x`: the stable disk of the inverse map with the
/// bundles exchanged. `returns` are backward resonance returns.
pub fn local_unstable_manifold(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x: &TorusPoint,
    returns: &[usize],
    cfg: &ManifoldConfig,
) -> Result<(AdmissibleDisk, ManifoldCertificate)> {
    let rev = Reversed(map);
    let sw = Swapped(s);
    let (mut disk, cert) = local_stable_manifold(&rev, &sw, x, returns, &cfg.reversed())?;
    disk.base_bundle = E;
    Ok((disk, cert))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Intersection {
    pub point: TorusPoint,
    pub residual: f64,
    /// Parameters on the two disks.
    pub params: (f64, f64),
}

/// The common point of two transverse disks by 2x2 Newton on the parameters.
pub fn intersect_disks(a: &AdmissibleDisk, b: &AdmissibleDisk) -> Result<Intersection> {
    let reach = a.radius.max(a.graph.hi - a.graph.lo)
        + b.radius.max(b.graph.hi - b.graph.lo)
        + a.offset()
        + b.offset();
    if a.center.distance(&b.center) > 2.0 * reach + 1e-12 {
        return Err(Error::NoIntersection("disjoint chart balls".into()));
    }
    let (mut u, mut v) = (a.center_param(), b.center_param());
    let mut res = f64::INFINITY;
    let base = a.center.displacement_to(&b.center);
    let gap = |u: f64, v: f64| base + b.offset_vec(v) - a.offset_vec(u);
    for _ in 0..60 {
        let d = gap(u, v);
        res = d.norm();
        let jac = Mat2::from_columns(&[-a.tangent(u), b.tangent(v)]);
        let inv = jac
            .try_inverse()
            .ok_or(Error::NoIntersection("tangent disks".into()))?;
        let step = inv * d;
        u -= step[0];
        v -= step[1];
        if step.norm() < 1e-16 {
            break;
        }
    }
    res = res.min(gap(u, v).norm());
    let tol = |g: &ChebGraph| 1e-9 * (1.0 + g.hi - g.lo);
    let inside = |g: &ChebGraph, p: f64| p >= g.lo - tol(g) && p <= g.hi + tol(g);
    if !inside(&a.graph, u) || !inside(&b.graph, v) {
        return Err(Error::NoIntersection(format!(
            "crossing at parameters ({u:e}, {v:e}) lies outside the disks"
        )));
    }
    if res > 1e-12 {
        return Err(Error::Solver(format!("intersection residual {res:e}")));
    }
    Ok(Intersection {
        point: a.point(u),
        residual: res,
        params: (u, v),
    })
}

/// First block return n_K at which the image of `set` lies on the local
/// stable disk through map^{n_K}(x), within `tol`. Disks at each return are
/// pulled back over `chain_len` steps.
#[allow(clippy::too_many_arguments)]
pub fn trap_check(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x: &TorusPoint,
    set: &[TorusPoint],
    tau: f64,
    budget: usize,
    returns: &[usize],
    chain_len: usize,
    tol: f64,
    cfg: &ManifoldConfig,
) -> Result<usize> {
    let tau_max = 0.0f64.min(cfg.exponents.chi_e - 2.0 * cfg.epsilon);
    if tau >= tau_max {
        return Err(Error::Precondition(format!("tau {tau} not below {tau_max}")));
    }
    let diam = |pts: &[TorusPoint]| {
        let mut d: f64 = 0.0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                d = d.max(pts[i].distance(&pts[j]));
            }
        }
        d
    };
    let mut pts = set.to_vec();
    let mut images = vec![pts.clone()];
    let mut prev = diam(&pts);
    for n in 1..=budget {
        pts = pts.iter().map(|p| map.forward(p)).collect();
        let cur = (-tau * n as f64).exp() * diam(&pts);
        if cur > prev * (1.0 + 1e-9) + 1e-15 {
            return Err(Error::Precondition(format!(
                "e^(-tau n) diam(g^n B) increases at n = {n}"
            )));
        }
        prev = cur;
        images.push(pts.clone());
    }
    let seg = orbit(map, x, budget + chain_len)?;
    let mut rets: Vec<usize> = returns.iter().copied().filter(|&n| n <= budget).collect();
    rets.sort_unstable();
    for n in rets {
        let top = AdmissibleDisk::along_bundle(s, seg.points[n + chain_len], F, 1.25 * cfg.radius, cfg.degree);
        let pr = pull_subdisk(
            map,
            s,
            &seg.points[n..=n + chain_len],
            &top,
            cfg.radius,
            1.0,
            cfg.degree,
        )?;
        let disk = &pr.chain[0];
        let mut ok = true;
        for p in &images[n] {
            match disk.vertical_distance(p)? {
                Some(d) if d <= tol => {}
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(n);
        }
    }
    Err(Error::Solver("trap budget exhausted".into()))
}

/// Largest r <= MAX_CHART_RADIUS at which the one-step log stretch of the
/// splitting directions changes by at most eps/4 across the ball B(y, r), over
/// a `samples` x `samples` grid of base points.
pub fn chart_radius(map: &dyn DiscreteMap, s: &dyn Splitting, epsilon: f64, samples: usize) -> f64 {
    let samples = samples.max(1);
    let bases: Vec<(TorusPoint, [Vec2; 2], [f64; 2])> = (0..samples * samples)
        .map(|i| {
            let y = TorusPoint::new(
                (i / samples) as f64 / samples as f64 + 0.5 / samples as f64,
                (i % samples) as f64 / samples as f64 + 0.5 / samples as f64,
            );
            let fr = [unit(s.frame(E, &y)), unit(s.frame(F, &y))];
            let d = map.derivative(&y);
            let l = [(d * fr[0]).norm().ln(), (d * fr[1]).norm().ln()];
            (y, fr, l)
        })
        .collect();
    let distortion = |r: f64| -> f64 {
        let mut m: f64 = 0.0;
        for (y, fr, l) in &bases {
            for k in 0..8 {
                let a = std::f64::consts::PI * k as f64 / 4.0;
                let q = y.offset(Vec2::new(a.cos(), a.sin()) * r);
                let d = map.derivative(&q);
                for b in 0..2 {
                    m = m.max(((d * fr[b]).norm().ln() - l[b]).abs());
                }
            }
        }
        m
    };
    let target = epsilon / 4.0;
    if distortion(MAX_CHART_RADIUS) <= target {
        return MAX_CHART_RADIUS;
    }
    let (mut lo, mut hi) = (0.0, MAX_CHART_RADIUS);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if distortion(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Largest theta in {2^0, 2^-1, ..., 2^-30} for which one step stretches every
/// vector of the F cone of width theta within a factor e^{eps/4} of the F
/// direction itself, over a sample grid.
pub fn theta1(map: &dyn DiscreteMap, s: &dyn Splitting, epsilon: f64, samples: usize) -> f64 {
    let samples = samples.max(1);
    let ok = |theta: f64| {
        (0..samples * samples).all(|i| {
            let y = TorusPoint::new(
                (i / samples) as f64 / samples as f64 + 0.5 / samples as f64,
                (i % samples) as f64 / samples as f64 + 0.5 / samples as f64,
            );
            let e = unit(s.frame(E, &y));
            let f = unit(s.frame(F, &y));
            let d = map.derivative(&y);
            let lf = (d * f).norm().ln();
            [1.0, -1.0].iter().all(|sg| {
                let v = f + e * (theta * sg);
                ((d * v).norm().ln() - v.norm().ln() - lf).abs() <= epsilon / 4.0
            })
        })
    };
    (0..=30)
        .map(|k| 2f64.powi(-k))
        .find(|&th| ok(th))
        .unwrap_or(0.0)
}

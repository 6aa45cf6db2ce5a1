//! Orbit segments, restricted norms of the derivative cocycle and Lyapunov
//! exponent estimates along bundles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{DiscreteMap, Mat2, Splitting, TorusPoint, Vec2, DEFAULT_ORBIT_CAP, E, F};

/// Steps beyond which a dense product of Jacobians is never formed.
pub const DENSE_PRODUCT_LIMIT: usize = 30;

#[derive(Clone, Debug)]
pub struct OrbitSegment {
    pub points: Vec<TorusPoint>,
    pub jacobians: Vec<Mat2>,
}

impl OrbitSegment {
    pub fn base(&self) -> TorusPoint {
        self.points[0]
    }

    /// Number of steps n (the segment holds n + 1 points).
    pub fn len(&self) -> usize {
        self.jacobians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jacobians.is_empty()
    }
}

pub fn orbit(map: &dyn DiscreteMap, x0: &TorusPoint, n: usize) -> Result<OrbitSegment> {
    orbit_capped(map, x0, n, DEFAULT_ORBIT_CAP)
}

pub fn orbit_capped(
    map: &dyn DiscreteMap,
    x0: &TorusPoint,
    n: usize,
    cap: usize,
) -> Result<OrbitSegment> {
    if n > cap {
        return Err(Error::OrbitCap { requested: n, cap });
    }
    let mut points = Vec::with_capacity(n + 1);
    let mut jacobians = Vec::with_capacity(n);
    points.push(*x0);
    for k in 0..n {
        let p = points[k];
        jacobians.push(map.derivative(&p));
        points.push(map.forward(&p));
    }
    Ok(OrbitSegment { points, jacobians })
}

/// Log of the one-step restriction of `jac` to bundle `bundle`, written in the
/// frame coordinates of the splitting at the source and target points.
pub fn step_log_factor(
    jac: &Mat2,
    from: &[Vec2; 2],
    to: &[Vec2; 2],
    bundle: usize,
    at: &TorusPoint,
) -> Result<f64> {
    let basis = Mat2::from_columns(&[to[E], to[F]]);
    let degenerate = || Error::FrameDegenerate {
        x: at.coords[0],
        y: at.coords[1],
    };
    if basis.determinant().abs() < 1e-12 {
        return Err(degenerate());
    }
    let coords = basis.try_inverse().ok_or_else(degenerate)? * (jac * from[bundle]);
    let c = coords[bundle].abs();
    if c < 1e-300 {
        return Err(degenerate());
    }
    Ok(c.ln())
}

fn frames_at(s: &dyn Splitting, x: &TorusPoint) -> [Vec2; 2] {
    [s.frame(E, x), s.frame(F, x)]
}

/// Per-step log norms and co-norms of the cocycle restricted to each bundle,
/// with prefix sums for window queries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocycleStats {
    pub log_norm: Vec<Vec<f64>>,
    pub log_conorm: Vec<Vec<f64>>,
    prefix_norm: Vec<Vec<f64>>,
    prefix_conorm: Vec<Vec<f64>>,
}

fn prefix(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for x in v {
        acc += x;
        out.push(acc);
    }
    out
}

impl CocycleStats {
    pub fn from_logs(log_norm: Vec<Vec<f64>>, log_conorm: Vec<Vec<f64>>) -> Self {
        let prefix_norm = log_norm.iter().map(|v| prefix(v)).collect();
        let prefix_conorm = log_conorm.iter().map(|v| prefix(v)).collect();
        CocycleStats {
            log_norm,
            log_conorm,
            prefix_norm,
            prefix_conorm,
        }
    }

    pub fn steps(&self) -> usize {
        self.log_norm[0].len()
    }

    pub fn bundles(&self) -> usize {
        self.log_norm.len()
    }

    /// Log norm and log co-norm of the `steps`-step product starting at step
    /// `from`. For line bundles both equal the accumulated log stretch.
    pub fn restricted_norms(&self, bundle: usize, from: usize, steps: usize) -> Result<(f64, f64)> {
        if from + steps > self.steps() {
            return Err(Error::InsufficientWindow {
                lo: from as i64,
                hi: (from + steps) as i64,
                len: self.steps(),
            });
        }
        let n = self.prefix_norm[bundle][from + steps] - self.prefix_norm[bundle][from];
        let c = self.prefix_conorm[bundle][from + steps] - self.prefix_conorm[bundle][from];
        Ok((n, c))
    }

    /// Per-step data of the power system g = f^N (line bundles only, where
    /// restricted norms multiply exactly).
    pub fn power(&self, n: usize) -> CocycleStats {
        let agg = |v: &Vec<f64>| -> Vec<f64> { v.chunks_exact(n).map(|c| c.iter().sum()).collect() };
        CocycleStats::from_logs(
            self.log_norm.iter().map(agg).collect(),
            self.log_conorm.iter().map(agg).collect(),
        )
    }

    /// Orbit averages (chi_E^-, chi_F^+) of the per-step logs.
    pub fn mean_exponents(&self) -> (f64, f64) {
        let n = self.steps() as f64;
        (
            self.prefix_conorm[E][self.steps()] / n,
            self.prefix_norm[F][self.steps()] / n,
        )
    }

    /// CSV with columns k, bundle, lognorm, logconorm.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,bundle,lognorm,logconorm")?;
        for k in 0..self.steps() {
            for b in 0..self.bundles() {
                writeln!(w, "{},{},{:e},{:e}", k, b, self.log_norm[b][k], self.log_conorm[b][k])?;
            }
        }
        Ok(())
    }
}

pub fn cocycle_stats(seg: &OrbitSegment, s: &dyn Splitting) -> Result<CocycleStats> {
    let nb = s.bundle_count();
    let mut logs = vec![Vec::with_capacity(seg.len()); nb];
    let mut from = frames_at(s, &seg.points[0]);
    for k in 0..seg.len() {
        let to = frames_at(s, &seg.points[k + 1]);
        for (b, l) in logs.iter_mut().enumerate() {
            l.push(step_log_factor(&seg.jacobians[k], &from, &to, b, &seg.points[k])?);
        }
        from = to;
    }
    Ok(CocycleStats::from_logs(logs.clone(), logs))
}

/// Restricted (log norm, log co-norm) of the `steps`-step product from index
/// `from` of the segment.
pub fn restricted_norms(
    seg: &OrbitSegment,
    s: &dyn Splitting,
    bundle: usize,
    from: usize,
    steps: usize,
) -> Result<(f64, f64)> {
    if from + steps > seg.len() {
        return Err(Error::InsufficientWindow {
            lo: from as i64,
            hi: (from + steps) as i64,
            len: seg.len(),
        });
    }
    let mut acc = 0.0;
    let mut f0 = frames_at(s, &seg.points[from]);
    for k in from..from + steps {
        let f1 = frames_at(s, &seg.points[k + 1]);
        acc += step_log_factor(&seg.jacobians[k], &f0, &f1, bundle, &seg.points[k])?;
        f0 = f1;
    }
    Ok((acc, acc))
}

/// Log of the norm of a dense product of at most [`DENSE_PRODUCT_LIMIT`]
/// Jacobians applied to a unit vector.
pub fn dense_log_stretch(jacobians: &[Mat2], v: &Vec2) -> Result<f64> {
    if jacobians.len() > DENSE_PRODUCT_LIMIT {
        return Err(Error::Precondition(format!(
            "dense products are limited to {DENSE_PRODUCT_LIMIT} steps"
        )));
    }
    let m = jacobians.iter().fold(Mat2::identity(), |acc, j| j * acc);
    Ok((m * v.normalize()).norm().ln())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleExponent {
    pub chi_minus: f64,
    pub chi_plus: f64,
    /// Partial averages (k, (1/k) sum of log factors) at geometric checkpoints.
    pub trace: Vec<(usize, f64)>,
    /// max - min of partial averages over k in [n/10, n].
    pub oscillation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub n: usize,
    pub bundles: Vec<BundleExponent>,
}

impl LyapunovEstimate {
    pub fn chi_e(&self) -> f64 {
        self.bundles[E].chi_minus
    }
    pub fn chi_f(&self) -> f64 {
        self.bundles[F].chi_plus
    }
}

pub const MIN_LYAPUNOV_STEPS: usize = 1000;

/// Streaming estimate of (chi^-, chi^+) per bundle over n steps.
pub fn lyapunov_estimate(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x0: &TorusPoint,
    n: usize,
) -> Result<LyapunovEstimate> {
    if n < MIN_LYAPUNOV_STEPS {
        return Err(Error::Precondition(format!(
            "lyapunov_estimate needs n >= {MIN_LYAPUNOV_STEPS}, got {n}"
        )));
    }
    if n > DEFAULT_ORBIT_CAP {
        return Err(Error::OrbitCap {
            requested: n,
            cap: DEFAULT_ORBIT_CAP,
        });
    }
    let nb = s.bundle_count();
    let mut sums = vec![0.0; nb];
    let mut traces = vec![Vec::new(); nb];
    let mut next_checkpoint = 1usize;
    let mut x = *x0;
    let mut from = frames_at(s, &x);
    for k in 1..=n {
        let jac = map.derivative(&x);
        let y = map.forward(&x);
        let to = frames_at(s, &y);
        for b in 0..nb {
            sums[b] += step_log_factor(&jac, &from, &to, b, &x)?;
        }
        if k == next_checkpoint || k == n {
            for b in 0..nb {
                traces[b].push((k, sums[b] / k as f64));
            }
            next_checkpoint = ((next_checkpoint as f64) * 1.05).ceil().max(next_checkpoint as f64 + 1.0) as usize;
        }
        x = y;
        from = to;
    }
    let bundles = (0..nb)
        .map(|b| {
            let chi = sums[b] / n as f64;
            let tail: Vec<f64> = traces[b]
                .iter()
                .filter(|(k, _)| *k >= n / 10)
                .map(|(_, v)| *v)
                .collect();
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            BundleExponent {
                chi_minus: chi,
                chi_plus: chi,
                trace: std::mem::take(&mut traces[b]),
                oscillation: hi - lo,
            }
        })
        .collect();
    Ok(LyapunovEstimate { n, bundles })
}

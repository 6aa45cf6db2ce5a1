//! Phase space (flat torus), invertible maps with derivatives, and invariant
//! splitting providers.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Index of the expanding bundle in a two-bundle splitting.
pub const E: usize = 0;
/// Index of the contracting bundle in a two-bundle splitting.
pub const F: usize = 1;

pub const DEFAULT_ORBIT_CAP: usize = 50_000_000;
pub const NEWTON_INVERSE_TOL: f64 = 1e-13;
pub const NEWTON_INVERSE_MAX_ITER: usize = 50;
pub const DEFAULT_MESH: usize = 256;

/// Reduce a real number into [0, 1).
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Representative of `x` modulo 1 in [-1/2, 1/2].
pub fn wrap_delta(x: f64) -> f64 {
    x - x.round()
}

/// Flat-torus distance in any dimension: Euclidean distance minimised over
/// integer translates.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = wrap_delta(x - y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub coords: [f64; 2],
}

impl TorusPoint {
    pub fn new(x: f64, y: f64) -> Self {
        TorusPoint {
            coords: [wrap(x), wrap(y)],
        }
    }

    pub fn from_vec(v: Vec2) -> Self {
        TorusPoint::new(v[0], v[1])
    }

    pub fn vec(&self) -> Vec2 {
        Vec2::new(self.coords[0], self.coords[1])
    }

    /// Shortest displacement vector from `self` to `other`.
    pub fn displacement_to(&self, other: &TorusPoint) -> Vec2 {
        Vec2::new(
            wrap_delta(other.coords[0] - self.coords[0]),
            wrap_delta(other.coords[1] - self.coords[1]),
        )
    }

    pub fn offset(&self, v: Vec2) -> TorusPoint {
        TorusPoint::new(self.coords[0] + v[0], self.coords[1] + v[1])
    }

    pub fn distance(&self, other: &TorusPoint) -> f64 {
        self.displacement_to(other).norm()
    }
}

pub fn sin_angle(a: &Vec2, b: &Vec2) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (a[0] * b[1] - a[1] * b[0]).abs() / (na * nb)
}

/// An invertible C^1 map of the flat 2-torus with evaluable derivative.
pub trait DiscreteMap: Send + Sync {
    fn forward(&self, x: &TorusPoint) -> TorusPoint;
    fn inverse(&self, x: &TorusPoint) -> TorusPoint;
    fn derivative(&self, x: &TorusPoint) -> Mat2;
    /// Derivative of the inverse map at `x`.
    fn inverse_derivative(&self, x: &TorusPoint) -> Mat2 {
        let d = self.derivative(&self.inverse(x));
        d.try_inverse().unwrap_or_else(Mat2::zeros)
    }
    /// f(x + v) - f(x) for a small displacement v. The default subtracts
    /// absolute positions; implementations may do better.
    fn forward_difference(&self, x: &TorusPoint, v: &Vec2) -> Vec2 {
        self.forward(x).displacement_to(&self.forward(&x.offset(*v)))
    }
    /// f^{-1}(y + v) - f^{-1}(y).
    fn inverse_difference(&self, y: &TorusPoint, v: &Vec2) -> Vec2 {
        self.inverse(y).displacement_to(&self.inverse(&y.offset(*v)))
    }
    fn descriptor(&self) -> String;
    fn dimension(&self) -> usize {
        2
    }
    /// Upper bound for the operator norm of the derivative over the torus.
    fn derivative_bound(&self) -> f64;
    /// Upper bound for the operator norm of the inverse derivative.
    fn inverse_derivative_bound(&self) -> f64;
}

/// One trigonometric perturbation term `amplitude * sin(2 pi (k . x) + phase)`
/// added to coordinate `component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub component: usize,
    pub amplitude: f64,
    pub k: [i32; 2],
    pub phase: f64,
}

impl TrigTerm {
    fn arg(&self, x: &Vec2) -> f64 {
        2.0 * PI * (self.k[0] as f64 * x[0] + self.k[1] as f64 * x[1]) + self.phase
    }

    fn lipschitz(&self) -> f64 {
        let k = ((self.k[0] * self.k[0] + self.k[1] * self.k[1]) as f64).sqrt();
        self.amplitude.abs() * 2.0 * PI * k
    }
}

/// Text label plus parameter record of a map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDescriptor {
    pub name: String,
    pub params: Vec<(String, f64)>,
}

impl fmt::Display for MapDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            write!(f, "{}{}={}", if i == 0 { ':' } else { ',' }, k, v)?;
        }
        Ok(())
    }
}

/// Linear torus automorphism plus a trigonometric-polynomial perturbation.
#[derive(Clone, Debug)]
pub struct TorusMap {
    pub linear: Mat2,
    pub terms: Vec<TrigTerm>,
    pub label: MapDescriptor,
    linear_inv: Mat2,
}

impl TorusMap {
    pub fn new(linear: Mat2, terms: Vec<TrigTerm>, label: MapDescriptor) -> Result<Self> {
        for v in linear.iter() {
            if v.fract() != 0.0 {
                return Err(Error::Precondition(format!(
                    "linear part must be an integer matrix, found entry {v}"
                )));
            }
        }
        let det = linear.determinant();
        if (det.abs() - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "linear part must have determinant +-1, found {det}"
            )));
        }
        if terms.iter().any(|t| t.component > 1) {
            return Err(Error::Precondition("term component must be 0 or 1".into()));
        }
        let linear_inv = linear.try_inverse().expect("unimodular");
        let map = TorusMap {
            linear,
            terms,
            label,
            linear_inv,
        };
        let sv = map.linear.singular_values();
        let smin = sv[0].min(sv[1]);
        if map.perturbation_lipschitz() >= smin {
            return Err(Error::Precondition(format!(
                "perturbation Lipschitz constant {} not below smallest singular value {} of the linear part",
                map.perturbation_lipschitz(),
                smin
            )));
        }
        Ok(map)
    }

    pub fn cat() -> Self {
        TorusMap::new(
            Mat2::new(2.0, 1.0, 1.0, 1.0),
            vec![],
            MapDescriptor {
                name: "cat".into(),
                params: vec![],
            },
        )
        .expect("cat map is well formed")
    }

    pub fn identity() -> Self {
        TorusMap::new(
            Mat2::identity(),
            vec![],
            MapDescriptor {
                name: "identity".into(),
                params: vec![],
            },
        )
        .expect("identity is well formed")
    }

    /// f(x, y) = A(x, y) + (delta / 2 pi) (sin 2 pi x, 0) mod 1.
    pub fn perturbed_cat(delta: f64) -> Result<Self> {
        TorusMap::new(
            Mat2::new(2.0, 1.0, 1.0, 1.0),
            vec![TrigTerm {
                component: 0,
                amplitude: delta / (2.0 * PI),
                k: [1, 0],
                phase: 0.0,
            }],
            MapDescriptor {
                name: "perturbed-cat".into(),
                params: vec![("delta".into(), delta)],
            },
        )
    }

    fn perturbation_lipschitz(&self) -> f64 {
        self.terms.iter().map(|t| t.lipschitz()).sum()
    }

    fn lifted_forward(&self, x: &Vec2) -> Vec2 {
        let mut y = self.linear * x;
        for t in &self.terms {
            y[t.component] += t.amplitude * t.arg(x).sin();
        }
        y
    }

    fn derivative_at(&self, x: &Vec2) -> Mat2 {
        let mut d = self.linear;
        for t in &self.terms {
            let c = t.amplitude * 2.0 * PI * t.arg(x).cos();
            d[(t.component, 0)] += c * t.k[0] as f64;
            d[(t.component, 1)] += c * t.k[1] as f64;
        }
        d
    }

    /// Newton inverse; returns the point and whether the tolerance was met.
    pub fn try_inverse_point(&self, y: &TorusPoint) -> (TorusPoint, bool) {
        let target = y.vec();
        let mut x = self.linear_inv * target;
        if self.terms.is_empty() {
            return (TorusPoint::from_vec(x), true);
        }
        for _ in 0..NEWTON_INVERSE_MAX_ITER {
            let fx = self.lifted_forward(&x);
            let r = Vec2::new(wrap_delta(fx[0] - target[0]), wrap_delta(fx[1] - target[1]));
            let d = self.derivative_at(&x);
            let dx = match d.try_inverse() {
                Some(inv) => inv * r,
                None => break,
            };
            x -= dx;
            if dx.norm() < NEWTON_INVERSE_TOL {
                return (TorusPoint::from_vec(x), true);
            }
        }
        (TorusPoint::from_vec(x), false)
    }
}

impl DiscreteMap for TorusMap {
    fn forward(&self, x: &TorusPoint) -> TorusPoint {
        TorusPoint::from_vec(self.lifted_forward(&x.vec()))
    }

    fn inverse(&self, x: &TorusPoint) -> TorusPoint {
        self.try_inverse_point(x).0
    }

    fn derivative(&self, x: &TorusPoint) -> Mat2 {
        self.derivative_at(&x.vec())
    }

    fn forward_difference(&self, x: &TorusPoint, v: &Vec2) -> Vec2 {
        let xv = x.vec();
        let mut d = self.linear * v;
        for t in &self.terms {
            let a = t.arg(&xv);
            let h = 2.0 * PI * (t.k[0] as f64 * v[0] + t.k[1] as f64 * v[1]);
            d[t.component] += t.amplitude * 2.0 * (a + 0.5 * h).cos() * (0.5 * h).sin();
        }
        d
    }

    fn inverse_difference(&self, y: &TorusPoint, v: &Vec2) -> Vec2 {
        let mut w = self.linear_inv * v;
        if self.terms.is_empty() {
            return w;
        }
        let x = self.inverse(y);
        // f(x) misses y by the inverse tolerance
        let base = y.displacement_to(&self.forward(&x));
        for _ in 0..NEWTON_INVERSE_MAX_ITER {
            let r = self.forward_difference(&x, &w) + base - v;
            let dx = match self.derivative(&x.offset(w)).try_inverse() {
                Some(inv) => inv * r,
                None => break,
            };
            w -= dx;
            if dx.norm() <= 1e-16 * w.norm() || dx.norm() == 0.0 {
                break;
            }
        }
        w
    }

    fn descriptor(&self) -> String {
        self.label.to_string()
    }

    fn derivative_bound(&self) -> f64 {
        self.linear.norm().max(self.linear.singular_values().max()) + self.perturbation_lipschitz()
    }

    fn inverse_derivative_bound(&self) -> f64 {
        let sv = self.linear.singular_values();
        1.0 / (sv[0].min(sv[1]) - self.perturbation_lipschitz())
    }
}

/// The inverse of a map, viewed as a map in its own right.
pub struct Reversed<'a>(pub &'a dyn DiscreteMap);

impl DiscreteMap for Reversed<'_> {
    fn forward(&self, x: &TorusPoint) -> TorusPoint {
        self.0.inverse(x)
    }
    fn inverse(&self, x: &TorusPoint) -> TorusPoint {
        self.0.forward(x)
    }
    fn derivative(&self, x: &TorusPoint) -> Mat2 {
        self.0.inverse_derivative(x)
    }
    fn inverse_derivative(&self, x: &TorusPoint) -> Mat2 {
        self.0.derivative(x)
    }
    fn forward_difference(&self, x: &TorusPoint, v: &Vec2) -> Vec2 {
        self.0.inverse_difference(x, v)
    }
    fn inverse_difference(&self, y: &TorusPoint, v: &Vec2) -> Vec2 {
        self.0.forward_difference(y, v)
    }
    fn descriptor(&self) -> String {
        format!("inverse({})", self.0.descriptor())
    }
    fn derivative_bound(&self) -> f64 {
        self.0.inverse_derivative_bound()
    }
    fn inverse_derivative_bound(&self) -> f64 {
        self.0.derivative_bound()
    }
}

/// The power system g = f^N.
pub struct PowerMap<'a> {
    pub base: &'a dyn DiscreteMap,
    pub n: usize,
}

impl DiscreteMap for PowerMap<'_> {
    fn forward(&self, x: &TorusPoint) -> TorusPoint {
        (0..self.n).fold(*x, |p, _| self.base.forward(&p))
    }
    fn inverse(&self, x: &TorusPoint) -> TorusPoint {
        (0..self.n).fold(*x, |p, _| self.base.inverse(&p))
    }
    fn derivative(&self, x: &TorusPoint) -> Mat2 {
        let mut p = *x;
        let mut d = Mat2::identity();
        for _ in 0..self.n {
            d = self.base.derivative(&p) * d;
            p = self.base.forward(&p);
        }
        d
    }
    fn forward_difference(&self, x: &TorusPoint, v: &Vec2) -> Vec2 {
        let (mut p, mut d) = (*x, *v);
        for _ in 0..self.n {
            d = self.base.forward_difference(&p, &d);
            p = self.base.forward(&p);
        }
        d
    }
    fn inverse_difference(&self, y: &TorusPoint, v: &Vec2) -> Vec2 {
        let (mut p, mut d) = (*y, *v);
        for _ in 0..self.n {
            d = self.base.inverse_difference(&p, &d);
            p = self.base.inverse(&p);
        }
        d
    }
    fn descriptor(&self) -> String {
        format!("power({},{})", self.base.descriptor(), self.n)
    }
    fn derivative_bound(&self) -> f64 {
        self.base.derivative_bound().powi(self.n as i32)
    }
    fn inverse_derivative_bound(&self) -> f64 {
        self.base.inverse_derivative_bound().powi(self.n as i32)
    }
}

/// Parse a registry descriptor such as `cat`, `identity`,
/// `perturbed-cat:delta=0.1` or `file:path/to/coefficients.txt`.
pub fn map_from_descriptor(desc: &str) -> Result<TorusMap> {
    let desc = desc.trim();
    let (name, rest) = match desc.split_once(':') {
        Some((n, r)) => (n, Some(r)),
        None => (desc, None),
    };
    match name {
        "cat" => Ok(TorusMap::cat()),
        "identity" => Ok(TorusMap::identity()),
        "perturbed-cat" => {
            let mut delta = 0.1;
            if let Some(r) = rest {
                for kv in r.split(',').filter(|s| !s.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Precondition(format!("bad parameter '{kv}'")))?;
                    match k.trim() {
                        "delta" => {
                            delta = v.trim().parse().map_err(|_| {
                                Error::Precondition(format!("bad delta value '{v}'"))
                            })?
                        }
                        other => {
                            return Err(Error::Precondition(format!("unknown parameter '{other}'")))
                        }
                    }
                }
            }
            TorusMap::perturbed_cat(delta)
        }
        "file" => {
            let path = rest.ok_or_else(|| Error::Precondition("file: needs a path".into()))?;
            map_from_file(Path::new(path))
        }
        other => Err(Error::Precondition(format!("unknown system '{other}'"))),
    }
}

pub fn map_from_file(path: &Path) -> Result<TorusMap> {
    let text = std::fs::read_to_string(path)?;
    parse_coefficients(&text, &path.display().to_string())
}

/// Parse the key=value coefficient format:
///
/// ```text
/// a11 = 2
/// a12 = 1
/// a21 = 1
/// a22 = 1
/// # component amplitude k1 k2 phase
/// term = 0 0.0159154943 1 0 0
/// ```
pub fn parse_coefficients(text: &str, name: &str) -> Result<TorusMap> {
    let mut a = [[None::<f64>; 2]; 2];
    let mut terms = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected key=value, found '{line}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad number '{s}'"),
            })
        };
        match key {
            "a11" => a[0][0] = Some(num(value)?),
            "a12" => a[0][1] = Some(num(value)?),
            "a21" => a[1][0] = Some(num(value)?),
            "a22" => a[1][1] = Some(num(value)?),
            "term" => {
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "term needs: component amplitude k1 k2 phase".into(),
                    });
                }
                let int = |s: &str| -> Result<i32> {
                    s.parse::<i32>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad integer '{s}'"),
                    })
                };
                terms.push(TrigTerm {
                    component: int(f[0])? as usize,
                    amplitude: num(f[1])?,
                    k: [int(f[2])?, int(f[3])?],
                    phase: num(f[4])?,
                });
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown key '{other}'"),
                })
            }
        }
    }
    let get = |r: usize, c: usize| {
        a[r][c].ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing a{}{}", r + 1, c + 1),
        })
    };
    let linear = Mat2::new(get(0, 0)?, get(0, 1)?, get(1, 0)?, get(1, 1)?);
    TorusMap::new(
        linear,
        terms,
        MapDescriptor {
            name: format!("file:{name}"),
            params: vec![],
        },
    )
}

/// Apply the map (or its inverse for negative `steps`) `|steps|` times.
pub fn evaluate(map: &dyn DiscreteMap, x: &TorusPoint, steps: i64, cap: usize) -> Result<TorusPoint> {
    let n = steps.unsigned_abs() as usize;
    if n > cap {
        return Err(Error::OrbitCap { requested: n, cap });
    }
    let mut p = *x;
    for _ in 0..n {
        p = if steps > 0 { map.forward(&p) } else { map.inverse(&p) };
    }
    Ok(p)
}

/// Point-indexed frames of invariant line bundles; bundle `E` (index 0) is
/// the expanding one and bundle `F` (index 1) the contracting one.
pub trait Splitting: Send + Sync {
    fn dims(&self) -> Vec<usize> {
        vec![1, 1]
    }
    fn bundle_count(&self) -> usize {
        self.dims().len()
    }
    fn frame(&self, bundle: usize, x: &TorusPoint) -> Vec2;
    /// Frame evaluated without mesh interpolation when the provider has one.
    fn frame_precise(&self, bundle: usize, x: &TorusPoint) -> Vec2 {
        self.frame(bundle, x)
    }
    /// Bound on the angular error introduced by interpolation.
    fn interpolation_error(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct ConstantSplitting {
    pub frames: [Vec2; 2],
}

impl ConstantSplitting {
    pub fn new(e: Vec2, f: Vec2) -> Self {
        ConstantSplitting {
            frames: [e.normalize(), f.normalize()],
        }
    }

    /// Exact eigenframes of the cat map [[2,1],[1,1]].
    pub fn cat() -> Self {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        ConstantSplitting::new(Vec2::new(1.0, g), Vec2::new(-g, 1.0))
    }
}

impl Splitting for ConstantSplitting {
    fn frame(&self, bundle: usize, _x: &TorusPoint) -> Vec2 {
        self.frames[bundle]
    }
}

/// Swaps the two bundles; pairs with [`Reversed`] for time reversal.
pub struct Swapped<'a>(pub &'a dyn Splitting);

impl Splitting for Swapped<'_> {
    fn frame(&self, bundle: usize, x: &TorusPoint) -> Vec2 {
        self.0.frame(1 - bundle, x)
    }
    fn frame_precise(&self, bundle: usize, x: &TorusPoint) -> Vec2 {
        self.0.frame_precise(1 - bundle, x)
    }
    fn interpolation_error(&self) -> f64 {
        self.0.interpolation_error()
    }
}

fn orient(v: Vec2, seed: &Vec2) -> Vec2 {
    if v.dot(seed) < 0.0 {
        -v
    } else {
        v
    }
}

/// Push two seeds along the backward orbit of `x` (expanding bundle) or the
/// forward orbit (contracting bundle); returns the frame and the sine of the
/// angle between the two pushed seeds.
fn cone_frame(
    map: &dyn DiscreteMap,
    x: &TorusPoint,
    seed: &Vec2,
    bundle: usize,
    depth: usize,
) -> (Vec2, f64) {
    let mut orbit = Vec::with_capacity(depth + 1);
    orbit.push(*x);
    for j in 0..depth {
        let p = if bundle == E {
            map.inverse(&orbit[j])
        } else {
            map.forward(&orbit[j])
        };
        orbit.push(p);
    }
    let perp = Vec2::new(-seed[1], seed[0]);
    let mut v1 = seed.normalize();
    let mut v2 = (seed.normalize() + 0.5 * perp.normalize()).normalize();
    for j in (1..=depth).rev() {
        let m = if bundle == E {
            map.derivative(&orbit[j])
        } else {
            map.derivative(&orbit[j - 1])
                .try_inverse()
                .unwrap_or_else(Mat2::zeros)
        };
        v1 = m * v1;
        v2 = m * v2;
        let (n1, n2) = (v1.norm(), v2.norm());
        if n1 == 0.0 || n2 == 0.0 {
            return (seed.normalize(), 1.0);
        }
        v1 /= n1;
        v2 /= n2;
    }
    (orient(v1, seed), sin_angle(&v1, &v2))
}

struct FrameMesh {
    n: usize,
    frames: Vec<[Vec2; 2]>,
}

/// Splitting obtained by cone iteration, cached on an n x n mesh with
/// bilinear interpolation and renormalisation.
pub struct ConeSplitting {
    map: Arc<dyn DiscreteMap>,
    seeds: [Vec2; 2],
    depth: usize,
    mesh: Option<FrameMesh>,
    mesh_error: f64,
}

impl ConeSplitting {
    /// Direct evaluation at `x`, failing if the two pushed seeds disagree by
    /// more than `tol`.
    pub fn frame_checked(&self, bundle: usize, x: &TorusPoint, tol: f64) -> Result<Vec2> {
        let (v, angle) = cone_frame(self.map.as_ref(), x, &self.seeds[bundle], bundle, self.depth);
        if angle > tol {
            return Err(Error::ConeNonConvergence { angle, tol });
        }
        Ok(v)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn mesh_size(&self) -> Option<usize> {
        self.mesh.as_ref().map(|m| m.n)
    }

    fn interpolate(&self, mesh: &FrameMesh, bundle: usize, x: &TorusPoint) -> Vec2 {
        let n = mesh.n;
        let u = x.coords[0] * n as f64;
        let v = x.coords[1] * n as f64;
        let i0 = (u.floor() as usize) % n;
        let j0 = (v.floor() as usize) % n;
        let fu = u - u.floor();
        let fv = v - v.floor();
        let i1 = (i0 + 1) % n;
        let j1 = (j0 + 1) % n;
        let c00 = mesh.frames[i0 * n + j0][bundle];
        let align = |w: Vec2| if w.dot(&c00) < 0.0 { -w } else { w };
        let c10 = align(mesh.frames[i1 * n + j0][bundle]);
        let c01 = align(mesh.frames[i0 * n + j1][bundle]);
        let c11 = align(mesh.frames[i1 * n + j1][bundle]);
        let w = c00 * ((1.0 - fu) * (1.0 - fv))
            + c10 * (fu * (1.0 - fv))
            + c01 * ((1.0 - fu) * fv)
            + c11 * (fu * fv);
        orient(w.normalize(), &self.seeds[bundle])
    }
}

impl Splitting for ConeSplitting {
    fn frame(&self, bundle: usize, x: &TorusPoint) -> Vec2 {
        match &self.mesh {
            Some(m) => self.interpolate(m, bundle, x),
            None => self.frame_precise(bundle, x),
        }
    }

    fn frame_precise(&self, bundle: usize, x: &TorusPoint) -> Vec2 {
        cone_frame(self.map.as_ref(), x, &self.seeds[bundle], bundle, self.depth).0
    }

    fn interpolation_error(&self) -> f64 {
        self.mesh_error
    }
}

pub const CONE_TOL: f64 = 1e-9;

/// Build a cone-iterated splitting. `seed_frames` = (expanding seed,
/// contracting seed). With `mesh = Some(n)` frames are cached on an n x n
/// grid; every mesh node is checked for convergence.
pub fn cone_iterate_splitting_with_mesh(
    map: Arc<dyn DiscreteMap>,
    seed_frames: (Vec2, Vec2),
    depth: usize,
    mesh: Option<usize>,
) -> Result<ConeSplitting> {
    let seeds = [seed_frames.0.normalize(), seed_frames.1.normalize()];
    let mut split = ConeSplitting {
        map: map.clone(),
        seeds,
        depth,
        mesh: None,
        mesh_error: 0.0,
    };
    if let Some(n) = mesh {
        let nodes: Vec<Result<[Vec2; 2]>> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let p = TorusPoint::new((idx / n) as f64 / n as f64, (idx % n) as f64 / n as f64);
                let e = split.frame_checked(E, &p, CONE_TOL)?;
                let f = split.frame_checked(F, &p, CONE_TOL)?;
                Ok([e, f])
            })
            .collect();
        let frames = nodes.into_iter().collect::<Result<Vec<_>>>()?;
        split.mesh = Some(FrameMesh { n, frames });
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let samples: Vec<TorusPoint> = (0..256)
            .map(|_| TorusPoint::new(rng.random(), rng.random()))
            .collect();
        split.mesh_error = samples
            .par_iter()
            .map(|p| {
                (0..2)
                    .map(|b| sin_angle(&split.frame(b, p), &split.frame_precise(b, p)))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
    } else {
        let p = TorusPoint::new(0.123, 0.456);
        split.frame_checked(E, &p, CONE_TOL)?;
        split.frame_checked(F, &p, CONE_TOL)?;
    }
    Ok(split)
}

/// Cone-iterated splitting on the default 256 x 256 mesh.
pub fn cone_iterate_splitting(
    map: Arc<dyn DiscreteMap>,
    seed_frames: (Vec2, Vec2),
    depth: usize,
) -> Result<ConeSplitting> {
    cone_iterate_splitting_with_mesh(map, seed_frames, depth, Some(DEFAULT_MESH))
}

/// Eigenvector seeds of the linear part, usable for any small perturbation
/// of a hyperbolic automorphism.
pub fn linear_seeds(map: &TorusMap) -> Result<(Vec2, Vec2)> {
    let a = map.linear;
    let tr = a.trace();
    let det = a.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc <= 0.0 {
        return Err(Error::Precondition("linear part is not hyperbolic".into()));
    }
    let l1 = (tr + disc.sqrt()) / 2.0;
    let l2 = (tr - disc.sqrt()) / 2.0;
    let (big, small) = if l1.abs() > l2.abs() { (l1, l2) } else { (l2, l1) };
    if big.abs() <= 1.0 || small.abs() >= 1.0 {
        return Err(Error::Precondition("linear part is not hyperbolic".into()));
    }
    let eig = |l: f64| {
        if a[(0, 1)].abs() > 1e-14 {
            Vec2::new(a[(0, 1)], l - a[(0, 0)]).normalize()
        } else if a[(1, 0)].abs() > 1e-14 {
            Vec2::new(l - a[(1, 1)], a[(1, 0)]).normalize()
        } else if (a[(0, 0)] - l).abs() < 1e-14 {
            Vec2::new(1.0, 0.0)
        } else {
            Vec2::new(0.0, 1.0)
        }
    };
    Ok((eig(big), eig(small)))
}

/// The splitting used by default for a registry map: exact eigenframes for
/// linear maps, cone iteration (depth 60, 256 mesh) otherwise.
pub fn default_splitting(map: &Arc<TorusMap>) -> Result<Arc<dyn Splitting>> {
    let seeds = linear_seeds(map)?;
    if map.terms.is_empty() {
        Ok(Arc::new(ConstantSplitting::new(seeds.0, seeds.1)))
    } else {
        let m: Arc<dyn DiscreteMap> = map.clone();
        Ok(Arc::new(cone_iterate_splitting(m, seeds, 60)?))
    }
}

/// Maximum over bundles of the sine of the angle between Df_x E_i(x) and
/// E_i(f(x)).
pub fn splitting_invariance_residual(
    map: &dyn DiscreteMap,
    s: &dyn Splitting,
    x: &TorusPoint,
) -> Result<f64> {
    let d = map.derivative(x);
    let fx = map.forward(x);
    let mut worst: f64 = 0.0;
    for b in 0..s.bundle_count() {
        let e = s.frame(b, x);
        if e.norm() < 1e-300 {
            return Err(Error::FrameDegenerate {
                x: x.coords[0],
                y: x.coords[1],
            });
        }
        let img = d * e;
        if img.norm() < 1e-300 {
            return Err(Error::FrameDegenerate {
                x: x.coords[0],
                y: x.coords[1],
            });
        }
        worst = worst.max(sin_angle(&img, &s.frame(b, &fx)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    #[test]
    fn cat_step_matches_hand_computation() {
        let m = TorusMap::cat();
        let y = evaluate(&m, &TorusPoint::new(0.1, 0.2), 1, 10).unwrap();
        assert!((y.coords[0] - 0.4).abs() < 1e-15);
        assert!((y.coords[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_and_zero_steps() {
        let m = TorusMap::cat();
        let o = TorusPoint::new(0.0, 0.0);
        assert_eq!(evaluate(&m, &o, 5, 10).unwrap(), o);
        let x = TorusPoint::new(0.3, 0.9);
        assert_eq!(evaluate(&m, &x, 0, 10).unwrap(), x);
        assert!(matches!(evaluate(&m, &x, 11, 10), Err(Error::OrbitCap { .. })));
    }

    #[test]
    fn forward_inverse_roundtrip_on_random_points() {
        let maps = [TorusMap::cat(), TorusMap::perturbed_cat(0.1).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in &maps {
            for _ in 0..1000 {
                let x = TorusPoint::new(rng.random(), rng.random());
                assert!(m.inverse(&m.forward(&x)).distance(&x) < 1e-12);
                assert!(m.forward(&m.inverse(&x)).distance(&x) < 1e-12);
                let sv = m.derivative(&x).singular_values();
                assert!(sv.min() > 1e-10);
            }
        }
    }

    #[test]
    fn perturbed_derivative_is_explicit_formula() {
        let m = TorusMap::perturbed_cat(0.1).unwrap();
        let x = TorusPoint::new(0.37, 0.81);
        let d = m.derivative(&x);
        let expect = 2.0 + 0.1 * (2.0 * PI * 0.37).cos();
        assert!((d[(0, 0)] - expect).abs() < 1e-15);
        assert_eq!((d[(0, 1)], d[(1, 0)], d[(1, 1)]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn cat_eigenframes_are_exactly_invariant() {
        let m = TorusMap::cat();
        let s = ConstantSplitting::cat();
        for x in [TorusPoint::new(0.1, 0.7), TorusPoint::new(0.55, 0.05)] {
            assert!(splitting_invariance_residual(&m, &s, &x).unwrap() <= 1e-14);
        }
        let id = TorusMap::identity();
        let s2 = ConstantSplitting::new(Vec2::new(1.0, 0.3), Vec2::new(0.2, 1.0));
        assert_eq!(splitting_invariance_residual(&id, &s2, &TorusPoint::new(0.4, 0.4)).unwrap(), 0.0);
    }

    #[test]
    fn cone_iteration_on_cat_finds_eigenvector() {
        // characteristic polynomial l^2 - 3 l + 1: l = (3 + sqrt5)/2, eigenvector (1, l - 2)
        let lam = (3.0 + 5f64.sqrt()) / 2.0;
        let expect = Vec2::new(1.0, lam - 2.0).normalize();
        let m: Arc<dyn DiscreteMap> = Arc::new(TorusMap::cat());
        let s = cone_iterate_splitting_with_mesh(
            m,
            (Vec2::new(1.0, 0.2), Vec2::new(-0.3, 1.0)),
            60,
            None,
        )
        .unwrap();
        let e = s.frame(E, &TorusPoint::new(0.3, 0.6));
        assert!((e - expect).norm() < 1e-12);
    }

    #[test]
    fn zero_perturbation_reduces_to_cat() {
        let m = Arc::new(TorusMap::perturbed_cat(0.0).unwrap());
        let seeds = linear_seeds(&m).unwrap();
        let s = cone_iterate_splitting_with_mesh(m, seeds, 60, None).unwrap();
        let c = ConstantSplitting::cat();
        let x = TorusPoint::new(0.71, 0.12);
        for b in [E, F] {
            assert!(sin_angle(&s.frame(b, &x), &c.frame(b, &x)) < 1e-12);
        }
    }

    #[test]
    fn perturbed_cone_depth_self_consistency() {
        let m = Arc::new(TorusMap::perturbed_cat(0.1).unwrap());
        let seeds = linear_seeds(&m).unwrap();
        let dm: Arc<dyn DiscreteMap> = m.clone();
        let s60 = cone_iterate_splitting_with_mesh(dm.clone(), seeds, 60, None).unwrap();
        let s120 = cone_iterate_splitting_with_mesh(dm, seeds, 120, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = TorusPoint::new(rng.random(), rng.random());
            for b in [E, F] {
                assert!(sin_angle(&s60.frame(b, &x), &s120.frame(b, &x)) <= 1e-10);
            }
        }
    }

    #[test]
    fn mesh_splitting_residual_within_interpolation_error() {
        let m = Arc::new(TorusMap::perturbed_cat(0.1).unwrap());
        let seeds = linear_seeds(&m).unwrap();
        let dm: Arc<dyn DiscreteMap> = m.clone();
        let s = cone_iterate_splitting(dm.clone(), seeds, 60).unwrap();
        let oracle = cone_iterate_splitting_with_mesh(dm, seeds, 10_000, None).unwrap();
        let tol = s.interpolation_error();
        assert!(tol < 1e-3, "mesh error {tol}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = TorusPoint::new(rng.random(), rng.random());
            for b in [E, F] {
                let a = sin_angle(&s.frame(b, &x), &oracle.frame(b, &x));
                assert!(a <= 2.0 * tol + 1e-12, "angle {a} vs {tol}");
            }
            let r = splitting_invariance_residual(m.as_ref(), &s, &x).unwrap();
            assert!(r <= 4.0 * tol + 1e-12);
        }
    }

    #[test]
    fn descriptor_registry() {
        assert_eq!(map_from_descriptor("cat").unwrap().descriptor(), "cat");
        let m = map_from_descriptor("perturbed-cat:delta=0.05").unwrap();
        assert_eq!(m.descriptor(), "perturbed-cat:delta=0.05");
        assert!(map_from_descriptor("pendulum").is_err());
        assert!(map_from_descriptor("perturbed-cat:delta=5").is_err());
    }

    #[test]
    fn coefficient_file_reproduces_perturbed_cat() {
        let amp = 0.1 / (2.0 * PI);
        let text = format!("a11=2\na12=1\na21=1\na22=1\n# sin term\nterm = 0 {amp} 1 0 0\n");
        let m = parse_coefficients(&text, "t").unwrap();
        let p = TorusMap::perturbed_cat(0.1).unwrap();
        let x = TorusPoint::new(0.2, 0.9);
        assert!(m.forward(&x).distance(&p.forward(&x)) < 1e-15);
        let err = parse_coefficients("a11=2\nbogus\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn torus_distance_is_a_bounded_metric(
            a in prop::array::uniform2(0.0f64..1.0),
            b in prop::array::uniform2(0.0f64..1.0),
            c in prop::array::uniform2(0.0f64..1.0),
        ) {
            let dab = torus_distance(&a, &b);
            let dbc = torus_distance(&b, &c);
            let dac = torus_distance(&a, &c);
            prop_assert!(dac <= dab + dbc + 1e-15);
            prop_assert!(dab <= 2f64.sqrt() / 2.0 + 1e-15);
            prop_assert!((dab - torus_distance(&b, &a)).abs() < 1e-15);
        }

        #[test]
        fn roundtrip_perturbed(x in 0.0f64..1.0, y in 0.0f64..1.0, delta in 0.0f64..0.3) {
            let m = TorusMap::perturbed_cat(delta).unwrap();
            let p = TorusPoint::new(x, y);
            prop_assert!(m.inverse(&m.forward(&p)).distance(&p) < 1e-12);
        }
    }
}

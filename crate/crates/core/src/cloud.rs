//! Uniform bucket grid over the torus for nearest-neighbour queries on point
//! clouds.

use crate::systems::TorusPoint;

pub struct CloudIndex {
    n: usize,
    buckets: Vec<Vec<u32>>,
    points: Vec<TorusPoint>,
}

impl CloudIndex {
    pub fn new(points: Vec<TorusPoint>) -> Self {
        let n = ((points.len() as f64 / 2.0).sqrt().floor() as usize).clamp(1, 2048);
        let mut buckets = vec![Vec::new(); n * n];
        for (i, p) in points.iter().enumerate() {
            buckets[Self::cell_of(n, p)].push(i as u32);
        }
        CloudIndex { n, buckets, points }
    }

    fn cell_of(n: usize, p: &TorusPoint) -> usize {
        let i = ((p.coords[0] * n as f64) as usize).min(n - 1);
        let j = ((p.coords[1] * n as f64) as usize).min(n - 1);
        i * n + j
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[TorusPoint] {
        &self.points
    }

    fn ring<F: FnMut(usize)>(&self, p: &TorusPoint, r: usize, mut visit: F) {
        let n = self.n as i64;
        let ci = ((p.coords[0] * n as f64) as i64).min(n - 1);
        let cj = ((p.coords[1] * n as f64) as i64).min(n - 1);
        let r = r as i64;
        for di in -r..=r {
            for dj in -r..=r {
                if di.abs() != r && dj.abs() != r {
                    continue;
                }
                let i = (ci + di).rem_euclid(n) as usize;
                let j = (cj + dj).rem_euclid(n) as usize;
                visit(i * self.n + j);
            }
        }
    }

    /// Index and distance of the nearest stored point.
    pub fn nearest(&self, p: &TorusPoint) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let h = 1.0 / self.n as f64;
        let mut best: Option<(usize, f64)> = None;
        let max_r = self.n / 2;
        for r in 0..=max_r {
            if 2 * r + 1 >= self.n {
                return self.brute_nearest(p);
            }
            self.ring(p, r, |c| {
                for &i in &self.buckets[c] {
                    let d = p.distance(&self.points[i as usize]);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i as usize, d));
                    }
                }
            });
            if let Some((_, bd)) = best {
                if bd <= r as f64 * h {
                    return best;
                }
            }
        }
        self.brute_nearest(p)
    }

    fn brute_nearest(&self, p: &TorusPoint) -> Option<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, q)| (i, p.distance(q)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    /// Indices of all stored points within `radius` of `p`, ascending.
    pub fn within(&self, p: &TorusPoint, radius: f64) -> Vec<usize> {
        let h = 1.0 / self.n as f64;
        let rings = (radius / h).ceil() as usize + 1;
        let mut out = Vec::new();
        if 2 * rings + 1 >= self.n {
            out.extend(
                self.points
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| p.distance(q) <= radius)
                    .map(|(i, _)| i),
            );
        } else {
            for r in 0..=rings {
                self.ring(p, r, |c| {
                    for &i in &self.buckets[c] {
                        if p.distance(&self.points[i as usize]) <= radius {
                            out.push(i as usize);
                        }
                    }
                });
            }
            out.sort_unstable();
            out.dedup();
        }
        out
    }

    /// Largest distance from a query point to the cloud.
    pub fn covering_radius<'a, I: IntoIterator<Item = &'a TorusPoint>>(&self, queries: I) -> f64 {
        queries
            .into_iter()
            .filter_map(|q| self.nearest(q).map(|(_, d)| d))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_and_within_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<TorusPoint> = (0..2000)
            .map(|_| TorusPoint::new(rng.random(), rng.random()))
            .collect();
        let idx = CloudIndex::new(pts.clone());
        for _ in 0..200 {
            let q = TorusPoint::new(rng.random(), rng.random());
            let (i, d) = idx.nearest(&q).unwrap();
            let bd = pts.iter().map(|p| p.distance(&q)).fold(f64::INFINITY, f64::min);
            assert_eq!(d, bd);
            assert_eq!(pts[i].distance(&q), d);
            let w = idx.within(&q, 0.05);
            let bw: Vec<usize> = (0..pts.len()).filter(|&k| pts[k].distance(&q) <= 0.05).collect();
            assert_eq!(w, bw);
        }
    }

    #[test]
    fn single_point_cloud() {
        let idx = CloudIndex::new(vec![TorusPoint::new(0.99, 0.01)]);
        let (_, d) = idx.nearest(&TorusPoint::new(0.01, 0.99)).unwrap();
        assert!((d - (0.02f64 * 0.02 * 2.0).sqrt()).abs() < 1e-12);
    }
}

//! Lloyd's k-means with seeded k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    /// Point index → cluster id.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Clusters re-seeded because they went empty, in order of occurrence.
    pub reseeded: Vec<usize>,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Nearest center under squared Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, point: &[f64]) -> usize {
        nearest_center(&self.centers, point).0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(centers: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn init_plus_plus<V: AsRef<[f64]>>(points: &[V], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].as_ref().to_vec()];
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centers[0]))
        .collect();
    while centers.len() < m {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` a hair short of `target`.
            pick.unwrap_or_else(|| {
                (0..n)
                    .rev()
                    .find(|&i| min_d[i] > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            // Only duplicates remain.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = points[pick].as_ref().to_vec();
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centers.push(c);
    }
    centers
}

/// Clusters `points` into `m` centers.
///
/// Stops when no center moves by more than `tol` (Euclidean) or after
/// `max_iter` Lloyd iterations. The returned assignment is always the
/// nearest-center assignment under the returned centers.
pub fn kmeans<V: AsRef<[f64]>>(
    points: &[V],
    m: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if m == 0 {
        return Err(Error::Input("k-means needs at least one cluster".into()));
    }
    if points.len() < m {
        return Err(Error::Input(format!(
            "k-means needs at least as many points ({}) as clusters ({m})",
            points.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(Error::Input("k-means points must be non-empty vectors".into()));
    }
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("k-means points must be finite".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = init_plus_plus(points, m, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    let mut distances = vec![0f64; points.len()];
    let mut reseeded = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let (k, d) = nearest_center(&centers, p.as_ref());
            assignment[i] = k;
            distances[i] = d;
        }
        let mut sums = vec![vec![0f64; dim]; m];
        let mut counts = vec![0usize; m];
        for (p, &k) in points.iter().zip(&assignment) {
            counts[k] += 1;
            sums[k].iter_mut().zip(p.as_ref()).for_each(|(s, x)| *s += x);
        }
        let mut next = Vec::with_capacity(m);
        for k in 0..m {
            if counts[k] == 0 {
                // Re-seed from the point farthest from its own center.
                let mut far = 0;
                for i in 1..points.len() {
                    if distances[i] > distances[far] {
                        far = i;
                    }
                }
                log::warn!("k-means cluster {k} went empty; re-seeded from point {far}");
                reseeded.push(k);
                distances[far] = 0.0;
                next.push(points[far].as_ref().to_vec());
            } else {
                let n = counts[k] as f64;
                next.push(sums[k].iter().map(|s| s / n).collect());
            }
        }
        let movement = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if movement < tol {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (k, d) = nearest_center(&centers, p.as_ref());
        assignment[i] = k;
        inertia += d;
    }
    Ok(ClusterModel {
        centers,
        assignment,
        inertia,
        iterations,
        reseeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_center_per_point() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![5.0, 5.0]];
        let model = kmeans(&pts, 4, 9, 50, 1e-9).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut seen = model.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_center_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![-1.0, 6.0]];
        let model = kmeans(&pts, 1, 0, 10, 1e-12).unwrap();
        assert!((model.centers[0][0] - 1.0).abs() < 1e-12);
        assert!((model.centers[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let pts = vec![vec![1.0, 2.0]];
        assert!(kmeans(&pts, 2, 0, 10, 1e-6).is_err());
        assert!(kmeans(&pts, 0, 0, 10, 1e-6).is_err());
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            kmeans(&ragged, 1, 0, 10, 1e-6),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicates_do_not_break_initialization() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let model = kmeans(&pts, 3, 4, 10, 1e-6).unwrap();
        assert_eq!(model.num_clusters(), 3);
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.91).cos()])
            .collect();
        let a = kmeans(&pts, 4, 123, 100, 1e-9).unwrap();
        let b = kmeans(&pts, 4, 123, 100, 1e-9).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn assignment_is_nearest_center(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 6..30),
            m in 1usize..5,
            seed in any::<u64>(),
        ) {
            let model = kmeans(&pts, m, seed, 25, 1e-9).unwrap();
            for (p, &k) in pts.iter().zip(&model.assignment) {
                let dk = sq_dist(p, &model.centers[k]);
                for c in &model.centers {
                    prop_assert!(dk <= sq_dist(p, c));
                }
            }
        }
    }
}

//! Seeded k-means (k-means++ initialization, Lloyd iterations) and
//! category-count estimation by filtering small clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{self, sq_dist};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    /// Cluster id of every input point; always the nearest center, ties to the lowest id.
    pub assignment: Vec<usize>,
    /// Sum of squared distances of points to their assigned centers.
    pub inertia: f64,
    pub n_iter: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Rename cluster ids: cluster `c` becomes `perm[c]`.
    pub fn relabel(&mut self, perm: &[usize]) {
        let mut centers = vec![Vec::new(); self.k()];
        for (c, center) in self.centers.drain(..).enumerate() {
            centers[perm[c]] = center;
        }
        self.centers = centers;
        for a in &mut self.assignment {
            *a = perm[*a];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub restarts: usize,
    /// Candidates per greedy k-means++ step; `None` means `2 + floor(ln k)`.
    pub local_trials: Option<usize>,
}

impl KMeans {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
            restarts: 5,
            local_trials: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn local_trials(mut self, trials: usize) -> Self {
        self.local_trials = Some(trials);
        self
    }

    pub fn fit(&self, points: &[Vec<f64>]) -> Result<Clustering> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if points.len() < self.k {
            return Err(Error::invalid(format!(
                "k = {} exceeds the number of points ({})",
                self.k,
                points.len()
            )));
        }
        let dim = points[0].len();
        for p in points {
            if p.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    actual: p.len(),
                });
            }
            if !vector::all_finite(p) {
                return Err(Error::NonFinite("k-means input"));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best: Option<Clustering> = None;
        for _ in 0..self.restarts.max(1) {
            let trials = self.local_trials.unwrap_or(2 + (self.k as f64).ln().floor() as usize);
            let init = kmeans_plus_plus(points, self.k, trials, &mut rng);
            let run = lloyd(points, init, self.max_iter, self.tol);
            if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                best = Some(run);
            }
        }
        Ok(best.expect("at least one restart"))
    }
}

/// k-means with the default restart count.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Clustering> {
    KMeans::new(k).seed(seed).max_iter(max_iter).tol(tol).fit(points)
}

/// Index drawn with probability proportional to `weights`.
fn sample_weighted(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.len() - 1
}

/// Greedy k-means++ seeding: each step draws `trials` D²-weighted candidates
/// and keeps the one that lowers the potential most.
fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, trials: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            let c = points[rng.random_range(0..n)].clone();
            centers.push(c);
            continue;
        }
        let candidates: Vec<usize> = (0..trials.max(1)).map(|_| sample_weighted(&d2, total, rng)).collect();
        let (best, best_d2) = candidates
            .iter()
            .map(|&c| {
                let nd: Vec<f64> = points
                    .par_iter()
                    .zip(&d2)
                    .map(|(p, &d)| d.min(sq_dist(p, &points[c])))
                    .collect();
                (c, nd)
            })
            .fold(None::<(usize, Vec<f64>, f64)>, |acc, (c, nd)| {
                let pot: f64 = nd.iter().sum();
                match acc {
                    Some((_, _, bp)) if bp <= pot => acc,
                    _ => Some((c, nd, pot)),
                }
            })
            .map(|(c, nd, _)| (c, nd))
            .expect("at least one candidate");
        d2 = best_d2;
        centers.push(points[best].clone());
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| vector::nearest(p, centers))
        .collect()
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> Clustering {
    let k = centers.len();
    let dim = points[0].len();
    let mut history = Vec::new();
    let mut n_iter = 0;

    for _ in 0..max_iter {
        let nearest = assign(points, &centers);
        history.push(nearest.iter().map(|(_, d)| d).sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&nearest) {
            vector::axpy(&mut sums[c], 1.0, p);
            counts[c] += 1;
        }

        // Empty clusters take the point farthest from its current center.
        let mut taken = vec![false; points.len()];
        let mut new_centers = Vec::with_capacity(k);
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                new_centers.push(sums[c].iter().map(|s| s * inv).collect::<Vec<_>>());
            } else {
                let far = nearest
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold(None::<(usize, f64)>, |best, (i, &(_, d))| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                new_centers.push(points[far].clone());
            }
        }

        let shift = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| vector::dist(a, b))
            .fold(0.0, f64::max);
        centers = new_centers;
        n_iter += 1;
        if shift < tol {
            break;
        }
    }

    let nearest = assign(points, &centers);
    let inertia = nearest.iter().map(|(_, d)| d).sum();
    history.push(inertia);
    Clustering {
        centers,
        assignment: nearest.into_iter().map(|(c, _)| c).collect(),
        inertia,
        n_iter,
        inertia_history: history,
    }
}

/// Over-cluster with `k_max` centers and count the clusters holding at least
/// `drop_ratio * n / k_max` points.
pub fn estimate_k(points: &[Vec<f64>], k_max: usize, drop_ratio: f64, seed: u64) -> Result<usize> {
    if !(drop_ratio > 0.0 && drop_ratio < 1.0) {
        return Err(Error::config(format!("drop_ratio must lie in (0, 1), got {drop_ratio}")));
    }
    let cl = KMeans::new(k_max).seed(seed).fit(points)?;
    let threshold = drop_ratio * points.len() as f64 / k_max as f64;
    Ok(cl
        .cluster_sizes()
        .into_iter()
        .filter(|&s| s as f64 >= threshold)
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recomputed_inertia(points: &[Vec<f64>], cl: &Clustering) -> f64 {
        points
            .iter()
            .zip(&cl.assignment)
            .map(|(p, &c)| sq_dist(p, &cl.centers[c]))
            .sum()
    }

    #[test]
    fn distinct_points_become_centers() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0]];
        let cl = kmeans(&pts, 3, 1, 100, 1e-6).unwrap();
        assert_eq!(cl.inertia, 0.0);
        let mut centers = cl.centers.clone();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = pts.clone();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, expected);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 4.0], vec![6.0, 2.0]];
        let cl = kmeans(&pts, 1, 7, 100, 1e-9).unwrap();
        let mean = [3.0, 2.0];
        for (c, m) in cl.centers[0].iter().zip(mean) {
            assert!((c - m).abs() < 1e-12);
        }
        // N * total variance
        let expected: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!((cl.inertia - expected).abs() < 1e-9);
    }

    /// Exhaustive search over every 2-partition of six points.
    fn best_two_partition(points: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|i| mask >> i & 1 == 1);
            let ca = vector::mean_of(a.iter().map(|&i| points[i].as_slice()), 2).unwrap();
            let cb = vector::mean_of(b.iter().map(|&i| points[i].as_slice()), 2).unwrap();
            let cost: f64 = a.iter().map(|&i| sq_dist(&points[i], &ca)).sum::<f64>()
                + b.iter().map(|&i| sq_dist(&points[i], &cb)).sum::<f64>();
            if cost < best.0 {
                best = (cost, vec![ca, cb]);
            }
        }
        best.1.sort_by(|x, y| x.partial_cmp(y).unwrap());
        best
    }

    #[test]
    fn two_blobs_match_exhaustive_partition() {
        let pts: Vec<Vec<f64>> = [[0., 0.], [0., 1.], [1., 0.], [10., 10.], [10., 11.], [11., 10.]]
            .iter()
            .map(|p| p.to_vec())
            .collect();
        let (best_cost, best_centers) = best_two_partition(&pts);
        // frozen from the oracle: (1/3, 1/3) and (31/3, 31/3)
        assert!((best_centers[0][0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((best_centers[1][1] - 31.0 / 3.0).abs() < 1e-12);

        let cl = kmeans(&pts, 2, 3, 100, 1e-9).unwrap();
        let mut centers = cl.centers.clone();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (c, e) in centers.iter().flatten().zip(best_centers.iter().flatten()) {
            assert!((c - e).abs() < 1e-12);
        }
        assert!((cl.inertia - best_cost).abs() < 1e-9);
    }

    #[test]
    fn assignment_is_nearest_and_inertia_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let cl = kmeans(&pts, 6, 9, 100, 1e-6).unwrap();
        for (p, &a) in pts.iter().zip(&cl.assignment) {
            assert_eq!(vector::nearest(p, &cl.centers).0, a);
        }
        let r = recomputed_inertia(&pts, &cl);
        assert!((r - cl.inertia).abs() <= 1e-6 * r);
        for w in cl.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn empty_clusters_are_handled() {
        let pts = vec![vec![1.0, 1.0]; 8];
        let cl = kmeans(&pts, 5, 0, 50, 1e-6).unwrap();
        assert_eq!(cl.inertia, 0.0);
        assert!(cl.assignment.iter().all(|&a| a < 5));
        assert_eq!(estimate_k(&pts, 5, 0.5, 0).unwrap(), 1);
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, 3, 0, 10, 1e-6).is_err());
        assert!(kmeans(&pts, 0, 0, 10, 1e-6).is_err());
        assert!(kmeans(&[vec![f64::NAN]], 1, 0, 10, 1e-6).is_err());
        assert!(estimate_k(&pts, 1, 1.5, 0).is_err());
    }

    #[test]
    fn k_max_one_estimates_one() {
        let pts = vec![vec![0.0], vec![1.0], vec![9.0]];
        assert_eq!(estimate_k(&pts, 1, 0.5, 0).unwrap(), 1);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| kmeans(&pts, 7, 2, 100, 1e-6).unwrap());
        let b = four.install(|| kmeans(&pts, 7, 2, 100, 1e-6).unwrap());
        assert_eq!(a, b);
    }
}

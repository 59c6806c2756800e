//! Seeded k-means over per-pixel feature vectors, used to visualize backbone features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{level_vectors, FeaturePyramid};
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.objective.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, c)| (*x as f64 - c).powi(2)).sum()
}

/// Within-cluster sum of squares of an arbitrary labelling.
pub fn within_cluster_ss(points: &[Vec<f32>], labels: &[usize], k: usize) -> f64 {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += *x as f64;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect();
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {n} available points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_f64 = |p: &Vec<f32>| p.iter().map(|&v| v as f64).collect::<Vec<_>>();

    let mut centroids = vec![to_f64(&points[rng.random_range(0..n)])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        };
        let c = to_f64(&points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let dim = centroids[0].len();
    let mut labels = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut obj = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            *l = best;
            obj += dist;
        }
        objective.push(obj);

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += *x as f64;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            // an empty cluster keeps its centroid
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            let moved = new.iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            shift = shift.max(moved);
            centroids[j] = new;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        objective,
        iterations,
    })
}

/// Clusters the channel vectors of one pyramid level (batch item 0). Returns the
/// row-major label map and its size.
pub fn kmeans_feature_map(
    pyramid: &FeaturePyramid,
    level: usize,
    k: usize,
    seed: u64,
) -> Result<(usize, usize, KMeansResult)> {
    let (h, w, rows) = level_vectors(pyramid, level, 0)?;
    let res = kmeans(&rows, k, seed)?;
    Ok((h, w, res))
}

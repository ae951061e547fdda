//! Lloyd's k-means with k-means++ seeding over flat vectors.

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can walk off the end; fall back to the farthest point
            pick.unwrap_or_else(|| {
                (0..n)
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]))
                    .expect("non-empty")
            })
        } else {
            // every point coincides with a centroid already
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Cluster `points` into `k` groups.
///
/// Iterates until the relative change in inertia drops below
/// [`RELATIVE_TOLERANCE`] or [`MAX_ITERATIONS`] is reached. A cluster that
/// loses all its members keeps its previous centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::mismatch("k-means point", dim, 0));
    }
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut prev = f64::INFINITY;
    let mut inertia;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            *a = j;
            inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let converged = inertia == 0.0 || (prev - inertia).abs() <= RELATIVE_TOLERANCE * prev;
        prev = inertia;
        if converged {
            break;
        }
    }
    // final assignment against the updated centroids
    inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *a = j;
        inertia += d;
    }
    Ok(Clustering {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

//! k-means with k-means++ seeding and Lloyd iterations.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the summed squared center shift falls to `tol` times the
    /// mean per-feature variance of the data.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 300,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point (lowest index on ties) with its squared distance.
fn assign(points: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .outer_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.outer_iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn seed_centers(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every point coincides with a center already
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

pub fn kmeans_pp(points: ArrayView2<'_, f64>, config: &KMeansConfig) -> Result<KMeansResult> {
    let (n, dim) = points.dim();
    let k = config.k;
    if k == 0 {
        return Err(CrispError::InvalidConfig("k must be at least 1".into()));
    }
    if n < k {
        return Err(CrispError::TooFewPoints { k, n });
    }
    if !(config.tol >= 0.0) || config.max_iters == 0 {
        return Err(CrispError::InvalidConfig("tol must be nonnegative and max_iters positive".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(CrispError::InvalidConfig("points must be finite".into()));
    }
    let mean_variance = points.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0);
    let tol = config.tol * mean_variance;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        let (labels, dists) = assign(points, centers.view());
        history.push(dists.iter().sum());
        if previous.as_ref() == Some(&labels) {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (p, &c) in points.outer_iter().zip(&labels) {
            let mut row = sums.row_mut(c);
            row += &p;
            counts[c] += 1;
        }
        let mut dists = dists;
        let mut updated = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                updated.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                updated.row_mut(c).assign(&points.row(far));
                dists[far] = 0.0;
            }
        }
        let shift: f64 = centers
            .outer_iter()
            .zip(updated.outer_iter())
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        centers = updated;
        previous = Some(labels);
        if shift <= tol {
            break;
        }
    }

    let (assignments, dists) = assign(points, centers.view());
    let inertia: f64 = dists.iter().sum();
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }
    Ok(KMeansResult {
        assignments,
        centers,
        inertia,
        inertia_history: history,
        iterations,
    })
}

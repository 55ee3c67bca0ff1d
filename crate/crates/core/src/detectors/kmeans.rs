use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    /// Cluster count; `None` means four per in-scope class.
    pub k: Option<usize>,
    pub max_iter: usize,
    /// Independent initializations; the lowest final inertia wins.
    pub restarts: usize,
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: None,
            max_iter: 100,
            restarts: 1,
            tolerance: 1e-6,
        }
    }
}

impl KMeansConfig {
    pub fn resolve_k(&self, classes: usize) -> usize {
        self.k.unwrap_or(4 * classes.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_history: Vec<f64>,
}

impl CentroidSet {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Euclidean distance to the nearest centroid.
    pub fn distance(&self, point: &[f32]) -> f64 {
        self.nearest(point.iter().map(|&v| f64::from(v))).1.sqrt()
    }

    /// (index, squared distance) of the nearest centroid.
    fn nearest(&self, point: impl Iterator<Item = f64> + Clone) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k {
            let d: f64 = point
                .clone()
                .zip(self.centroid(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm on `points` (each of equal length).
pub fn kmeans_fit(
    points: &[Vec<f32>],
    k: usize,
    config: &KMeansConfig,
    rng: &mut RngState,
) -> Result<CentroidSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape(
            "kmeans_fit",
            "points must share a positive dimension",
        ));
    }
    let data: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|&v| f64::from(v)).collect())
        .collect();
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    let mut best: Option<CentroidSet> = None;
    for _ in 0..config.restarts.max(1) {
        let fit = lloyd(&data, k, dim, config, rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn assign(data: &[Vec<f64>], centroids: &[f64], k: usize, dim: usize) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(data.len());
    let mut inertia = 0.0;
    for p in data {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels.push(best.0);
        inertia += best.1;
    }
    (labels, inertia)
}

fn lloyd(
    data: &[Vec<f64>],
    k: usize,
    dim: usize,
    config: &KMeansConfig,
    rng: &mut RngState,
) -> CentroidSet {
    let mut centroids: Vec<f64> = rng
        .sample_indices(data.len(), k)
        .into_iter()
        .flat_map(|i| data[i].iter().copied())
        .collect();
    let (mut labels, mut inertia) = assign(data, &centroids, k, dim);
    let mut history = vec![inertia];
    for _ in 0..config.max_iter {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (u, s) in updated[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *u = s / counts[c] as f64;
                }
            }
        }
        // re-seed empty clusters at the points farthest from their centroid
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = data
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &l))| (sq_dist(p, &updated[l * dim..(l + 1) * dim]), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (c, (_, i)) in empty.iter().zip(far) {
                updated[c * dim..(c + 1) * dim].copy_from_slice(&data[i]);
            }
        }
        let movement = (0..k)
            .map(|c| {
                sq_dist(
                    &updated[c * dim..(c + 1) * dim],
                    &centroids[c * dim..(c + 1) * dim],
                )
                .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = updated;
        let (new_labels, new_inertia) = assign(data, &centroids, k, dim);
        let fixpoint = new_labels == labels;
        labels = new_labels;
        inertia = new_inertia;
        history.push(inertia);
        let has_empty = {
            let mut seen = vec![false; k];
            labels.iter().for_each(|&l| seen[l] = true);
            seen.contains(&false)
        };
        if !has_empty && (fixpoint || movement < config.tolerance) {
            break;
        }
    }
    CentroidSet {
        k,
        dim,
        centroids,
        inertia,
        inertia_history: history,
    }
}

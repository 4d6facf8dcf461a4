//! Pairwise cosine distances, silhouettes, and distance dispersion.
//!
//! These kernels operate on row-major point sets (one sample per row). All
//! of them are exact f64 computations with no hidden parallelism, so results
//! are reproducible bit for bit. Subsampling for large point sets is seeded
//! and canonical: selected rows are kept in ascending original order.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::stats::population_std;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("point set is empty")]
    EmptyInput,
    #[error("points have zero columns")]
    ZeroDimensional,
    #[error("distance cap must be at least 2, got {cap}")]
    InvalidCap { cap: usize },
    #[error("cluster assignment has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("target cluster {target} has no points")]
    TargetClusterEmpty { target: usize },
    #[error("silhouette needs at least 2 distinct clusters, got {got}")]
    SingleCluster { got: usize },
    #[error("need at least 2 points, got {got}")]
    TooFewPoints { got: usize },
}

/// Symmetric distance matrix over a (possibly subsampled) point set.
///
/// `point_ids[i]` is the row index in the original point set that row/column
/// `i` of `values` refers to; ids are strictly increasing.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub n: usize,
    pub values: Array2<f64>,
    pub point_ids: Vec<usize>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

/// Cosine distance d(a, b) = 1 - a.b / (|a| |b|), clamped to [0, 2].
///
/// Rows with zero norm are assigned distance 1 to every other point (the
/// distance of orthogonal vectors); the diagonal is always 0. If the point
/// set has more than `cap` rows, a seeded sample of exactly `cap` rows is
/// used and recorded in `point_ids`.
pub fn cosine_distance_matrix(
    points: ArrayView2<'_, f64>,
    cap: usize,
    seed: u64,
) -> Result<DistanceMatrix, GeometryError> {
    let m = points.nrows();
    if m == 0 {
        return Err(GeometryError::EmptyInput);
    }
    if points.ncols() == 0 {
        return Err(GeometryError::ZeroDimensional);
    }
    if cap < 2 {
        return Err(GeometryError::InvalidCap { cap });
    }

    let point_ids: Vec<usize> = if m > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = rand::seq::index::sample(&mut rng, m, cap).into_vec();
        ids.sort_unstable();
        ids
    } else {
        (0..m).collect()
    };

    let n = point_ids.len();
    let norms: Vec<f64> = point_ids
        .iter()
        .map(|&id| points.row(id).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let a = points.row(point_ids[i]);
        for j in (i + 1)..n {
            let b = points.row(point_ids[j]);
            let d = if norms[i] == 0.0 || norms[j] == 0.0 {
                1.0
            } else {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
            };
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }

    Ok(DistanceMatrix { n, values, point_ids })
}

/// Mean silhouette of the points belonging to `target`, given a full
/// cluster assignment (`cluster_of[i]` labels row `i` of the matrix).
///
/// Per-point silhouette s = (b - a) / max(a, b) with a the mean distance to
/// the point's own cluster (excluding itself) and b the smallest mean
/// distance to any other cluster. Points in singleton clusters score 0, as
/// does any point with max(a, b) = 0.
pub fn silhouette_mean(
    dist: &DistanceMatrix,
    cluster_of: &[usize],
    target: usize,
) -> Result<f64, GeometryError> {
    if cluster_of.len() != dist.n {
        return Err(GeometryError::LengthMismatch {
            got: cluster_of.len(),
            expected: dist.n,
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cluster_of.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(GeometryError::SingleCluster { got: groups.len() });
    }
    let own = groups
        .get(&target)
        .ok_or(GeometryError::TargetClusterEmpty { target })?;

    // Every mean sums its distances in sorted order, so the result depends
    // only on which points form each cluster, not on point order.
    let mut buf: Vec<f64> = Vec::new();
    let sorted_mean = |values: &mut Vec<f64>| -> f64 {
        values.sort_by(f64::total_cmp);
        values.iter().sum::<f64>() / values.len() as f64
    };
    let mut scores: Vec<f64> = Vec::with_capacity(own.len());
    for &i in own {
        if own.len() == 1 {
            scores.push(0.0); // singleton: s = 0
            continue;
        }
        buf.clear();
        buf.extend(own.iter().filter(|&&j| j != i).map(|&j| dist.get(i, j)));
        let a = sorted_mean(&mut buf);
        let mut b = f64::INFINITY;
        for (_, members) in groups.iter().filter(|(&c, _)| c != target) {
            buf.clear();
            buf.extend(members.iter().map(|&j| dist.get(i, j)));
            b = b.min(sorted_mean(&mut buf));
        }
        let denom = a.max(b);
        scores.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(sorted_mean(&mut scores))
}

/// Population standard deviation of the distances between distinct pairs
/// (upper triangle of the matrix).
pub fn pairwise_distance_std(dist: &DistanceMatrix) -> Result<f64, GeometryError> {
    if dist.n < 2 {
        return Err(GeometryError::TooFewPoints { got: dist.n });
    }
    let mut ds = Vec::with_capacity(dist.n * (dist.n - 1) / 2);
    for i in 0..dist.n {
        for j in (i + 1)..dist.n {
            ds.push(dist.get(i, j));
        }
    }
    // Value-ordered accumulation: the dispersion is a function of the
    // distance multiset alone, independent of point order.
    ds.sort_by(f64::total_cmp);
    Ok(population_std(&ds))
}

//! Cluster validation: silhouette widths over a pluggable distance matrix,
//! model selection across candidate k, and the adjusted Rand index for
//! ground-truth comparisons.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    EuclideanOnLatent,
    DtwOnSeries,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SilhouetteReport {
    pub widths: Vec<f64>,
    pub mean: f64,
    pub k: usize,
    pub distance_kind: DistanceKind,
}

impl SilhouetteReport {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "k": self.k,
            "mean": self.mean,
            "distance_kind": self.distance_kind,
        })
    }
}

#[derive(Debug, Error)]
pub enum ClusterEvalError {
    #[error("silhouette undefined for fewer than 2 clusters")]
    SingleCluster,
    #[error("distance matrix is {rows}x{cols} but there are {n} labels")]
    ShapeMismatch { rows: usize, cols: usize, n: usize },
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points")]
    TooFewPoints,
    #[error("no candidate k provided")]
    NoCandidates,
}

/// Mean silhouette width `s(x) = (b(x) - a(x)) / max(a(x), b(x))` over a
/// precomputed symmetric distance matrix. Singleton clusters and the
/// degenerate a = b = 0 case both score 0 by convention.
pub fn silhouette(
    distances: &[Vec<f64>],
    labels: &[usize],
    distance_kind: DistanceKind,
) -> Result<SilhouetteReport, ClusterEvalError> {
    let n = labels.len();
    if distances.len() != n || distances.iter().any(|row| row.len() != n) {
        return Err(ClusterEvalError::ShapeMismatch {
            rows: distances.len(),
            cols: distances.first().map_or(0, |r| r.len()),
            n,
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(ClusterEvalError::SingleCluster);
    }
    let widths: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if counts[&own] == 1 {
                return 0.0;
            }
            let mut sums: BTreeMap<usize, f64> = counts.keys().map(|&c| (c, 0.0)).collect();
            for j in 0..n {
                if j != i {
                    *sums.get_mut(&labels[j]).unwrap() += distances[i][j];
                }
            }
            let a = sums[&own] / (counts[&own] - 1) as f64;
            let b = sums
                .iter()
                .filter(|(&c, _)| c != own)
                .map(|(&c, &s)| s / counts[&c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    let mean = widths.iter().sum::<f64>() / n as f64;
    Ok(SilhouetteReport {
        widths,
        mean,
        k: counts.len(),
        distance_kind,
    })
}

/// Symmetric zero-diagonal Euclidean distance matrix over row vectors.
pub fn euclidean_distance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = crate::linalg::squared_euclidean(&rows[i], &rows[j]).sqrt();
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    d
}

/// Pick the candidate k with the highest mean silhouette; ties break toward
/// the smaller k.
pub fn select_k(reports: &BTreeMap<usize, SilhouetteReport>) -> Result<usize, ClusterEvalError> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, report) in reports {
        // Iteration is in ascending k, so strict improvement keeps the
        // smaller k on ties.
        if best.map_or(true, |(_, score)| report.mean > score) {
            best = Some((k, report.mean));
        }
    }
    best.map(|(k, _)| k).ok_or(ClusterEvalError::NoCandidates)
}

/// Adjusted Rand index from the pair-counting contingency table. 1 for
/// identical partitions up to relabeling, expected 0 under independence.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64, ClusterEvalError> {
    if labels_a.len() != labels_b.len() {
        return Err(ClusterEvalError::LengthMismatch(
            labels_a.len(),
            labels_b.len(),
        ));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(ClusterEvalError::TooFewPoints);
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut row_sums: BTreeMap<usize, u64> = BTreeMap::new();
    let mut col_sums: BTreeMap<usize, u64> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_insert(0) += 1;
        *row_sums.entry(a).or_insert(0) += 1;
        *col_sums.entry(b).or_insert(0) += 1;
    }
    fn choose2(x: u64) -> f64 {
        (x * x.saturating_sub(1)) as f64 / 2.0
    }
    let sum_cells: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = row_sums.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = col_sums.values().map(|&v| choose2(v)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        // Both partitions trivial (e.g. both all-singletons or both one
        // cluster): agreement is perfect by convention.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

//! Two-component principal component analysis for latent-space scatter
//! plots: mean-center, eigendecompose the feature covariance, project onto
//! the top two eigenvectors. Signs are fixed so the largest-magnitude loading
//! of each component is positive, making the projection fully deterministic.

use trajcluster_core::linalg::sym_eigen;

/// Project rows onto the top-2 principal components. Returns n pairs
/// (pc1, pc2). With a single latent dimension the second component is zero.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = rows.len();
    assert!(n >= 2, "pca_2d needs at least 2 rows");
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    let (_, evecs) = sym_eigen(&cov, d);
    let component = |j: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|a| evecs[a * d + j]).collect();
        // Sign convention: the largest-magnitude loading is positive.
        let lead = v
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(1.0);
        if lead < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        v
    };
    let pc1 = component(0);
    let pc2 = if d >= 2 { component(1) } else { vec![0.0; d] };
    centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&pc1).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&pc2).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

//! Small dense linear-algebra helpers: symmetric eigendecomposition and a
//! seeded Euclidean K-means used for cluster extraction on latent rows.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// `a` is `n x n` row-major. Returns `(eigenvalues, eigenvectors)` sorted by
/// eigenvalue descending; eigenvector `j` is column `j` of the returned
/// row-major matrix.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = m[p * n + j];
                    let aqj = m[q * n + j];
                    m[p * n + j] = c * apj - s * aqj;
                    m[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + new_col] = v[i * n + old_col];
        }
    }
    (eigenvalues, vectors)
}

fn frobenius(m: &[f64], n: usize) -> f64 {
    m.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of a Euclidean K-means fit.
pub struct EuclideanKMeans {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

/// Lloyd's algorithm with `n_init` seeded random-sample restarts; the restart
/// with minimal inertia (sum of squared distances) wins, ties by restart index.
pub fn kmeans_euclidean(
    rows: &[Vec<f64>],
    k: usize,
    n_init: usize,
    max_iter: usize,
    seed: u64,
) -> EuclideanKMeans {
    assert!(k >= 1 && k <= rows.len());
    let mut best: Option<EuclideanKMeans> = None;
    for restart in 0..n_init {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add((restart as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        let init = sample(&mut rng, rows.len(), k).into_vec();
        let mut centers: Vec<Vec<f64>> = init.iter().map(|&i| rows[i].clone()).collect();
        let mut labels = vec![0usize; rows.len()];
        for _ in 0..max_iter {
            let mut changed = false;
            for (i, row) in rows.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = squared_euclidean(row, center);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if labels[i] != best_c {
                    labels[i] = best_c;
                    changed = true;
                }
            }
            // Recompute centers; empty clusters are reseeded with the point
            // farthest from its current center (lowest index on ties).
            let dim = rows[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, row) in rows.iter().enumerate() {
                counts[labels[i]] += 1;
                for (s, x) in sums[labels[i]].iter_mut().zip(row) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..rows.len())
                        .max_by(|&a, &b| {
                            let da = squared_euclidean(&rows[a], &centers[labels[a]]);
                            let db = squared_euclidean(&rows[b], &centers[labels[b]]);
                            da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                        })
                        .unwrap();
                    centers[c] = rows[far].clone();
                    labels[far] = c;
                } else {
                    for (j, s) in sums[c].iter().enumerate() {
                        centers[c][j] = s / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = rows
            .iter()
            .zip(&labels)
            .map(|(row, &l)| squared_euclidean(row, &centers[l]))
            .sum();
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(EuclideanKMeans {
                labels,
                centers,
                inertia,
            });
        }
    }
    best.unwrap()
}

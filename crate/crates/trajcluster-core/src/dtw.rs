//! Exact dynamic time warping for multivariate series with an L1 local cost,
//! warping-path recovery, and a brute-force path-enumeration oracle.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum DtwError {
    #[error("feature count mismatch: {0} vs {1}")]
    FeatureMismatch(usize, usize),
    #[error("empty series")]
    EmptySeries,
    #[error("brute-force oracle limited to series of length <= {limit}, got {n} and {m}")]
    TooLongForBruteForce { limit: usize, n: usize, m: usize },
}

/// A warping path as 1-based index pairs against series of lengths N and M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpingPath {
    pub pairs: Vec<(usize, usize)>,
}

impl WarpingPath {
    /// Check boundary, monotonicity, and step-size conditions.
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        if self.pairs.is_empty() || self.pairs[0] != (1, 1) || *self.pairs.last().unwrap() != (n, m)
        {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (di, dj) = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

#[derive(Debug, Clone)]
pub struct DtwResult {
    pub distance: f64,
    pub path: WarpingPath,
}

/// L1 local cost across features between timestep `i` of `x` and `j` of `y`.
#[inline]
fn local_cost(x: &Grid<f64>, y: &Grid<f64>, i: usize, j: usize) -> f64 {
    x.step(i)
        .iter()
        .zip(y.step(j))
        .map(|(a, b)| (a - b).abs())
        .sum()
}

fn check_inputs(x: &Grid<f64>, y: &Grid<f64>) -> Result<(), DtwError> {
    if x.n_features() != y.n_features() {
        return Err(DtwError::FeatureMismatch(x.n_features(), y.n_features()));
    }
    if x.n_timesteps() == 0 || y.n_timesteps() == 0 {
        return Err(DtwError::EmptySeries);
    }
    Ok(())
}

/// Minimum total alignment cost over all valid warping paths, plus one
/// optimal path. Backtracking ties prefer diagonal, then vertical (advance in
/// `x`), then horizontal steps, which makes the returned path deterministic.
pub fn dtw_distance(x: &Grid<f64>, y: &Grid<f64>) -> Result<DtwResult, DtwError> {
    check_inputs(x, y)?;
    let n = x.n_timesteps();
    let m = y.n_timesteps();
    let w = m + 1;
    let mut acc = vec![f64::INFINITY; (n + 1) * w];
    acc[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = acc[(i - 1) * w + (j - 1)]
                .min(acc[(i - 1) * w + j])
                .min(acc[i * w + (j - 1)]);
            acc[i * w + j] = local_cost(x, y, i - 1, j - 1) + best;
        }
    }
    let mut pairs = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 1 || j > 1 {
        pairs.push((i, j));
        let diag = if i > 1 && j > 1 {
            acc[(i - 1) * w + (j - 1)]
        } else {
            f64::INFINITY
        };
        let vert = if i > 1 { acc[(i - 1) * w + j] } else { f64::INFINITY };
        let horiz = if j > 1 { acc[i * w + (j - 1)] } else { f64::INFINITY };
        if diag <= vert && diag <= horiz {
            i -= 1;
            j -= 1;
        } else if vert <= horiz {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.push((1, 1));
    pairs.reverse();
    Ok(DtwResult {
        distance: acc[n * w + m],
        path: WarpingPath { pairs },
    })
}

/// Distance only, with a rolling two-row table; used in the K-means inner
/// loops where paths are not needed.
pub fn dtw_distance_only(x: &Grid<f64>, y: &Grid<f64>) -> Result<f64, DtwError> {
    check_inputs(x, y)?;
    let n = x.n_timesteps();
    let m = y.n_timesteps();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        let xi = x.step(i - 1);
        for j in 1..=m {
            let yj = y.step(j - 1);
            let mut cost = 0.0;
            for (a, b) in xi.iter().zip(yj) {
                cost += (a - b).abs();
            }
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Re-sum local costs along a path; consistency check for returned results.
pub fn path_cost(x: &Grid<f64>, y: &Grid<f64>, path: &WarpingPath) -> f64 {
    path.pairs
        .iter()
        .map(|&(i, j)| local_cost(x, y, i - 1, j - 1))
        .sum()
}

const BRUTE_FORCE_LIMIT: usize = 8;

/// Test oracle: recursively explores every valid warping path and returns the
/// minimum total cost. Exponential; guarded to short series.
pub fn dtw_distance_bruteforce(x: &Grid<f64>, y: &Grid<f64>) -> Result<f64, DtwError> {
    check_inputs(x, y)?;
    let n = x.n_timesteps();
    let m = y.n_timesteps();
    if n > BRUTE_FORCE_LIMIT || m > BRUTE_FORCE_LIMIT {
        return Err(DtwError::TooLongForBruteForce {
            limit: BRUTE_FORCE_LIMIT,
            n,
            m,
        });
    }
    fn explore(x: &Grid<f64>, y: &Grid<f64>, i: usize, j: usize) -> f64 {
        let here = local_cost(x, y, i, j);
        let n = x.n_timesteps();
        let m = y.n_timesteps();
        if i + 1 == n && j + 1 == m {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < n && j + 1 < m {
            best = best.min(explore(x, y, i + 1, j + 1));
        }
        if i + 1 < n {
            best = best.min(explore(x, y, i + 1, j));
        }
        if j + 1 < m {
            best = best.min(explore(x, y, i, j + 1));
        }
        here + best
    }
    Ok(explore(x, y, 0, 0))
}

/// Full pairwise distance matrix; each unordered pair is computed once, in
/// parallel, and mirrored so the result is exactly symmetric.
pub fn pairwise_dtw(series: &[Grid<f64>]) -> Result<Vec<Vec<f64>>, DtwError> {
    let n = series.len();
    for s in series {
        if s.n_features() != series[0].n_features() {
            return Err(DtwError::FeatureMismatch(
                series[0].n_features(),
                s.n_features(),
            ));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let distances: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance_only(&series[i], &series[j]).expect("validated inputs"))
        .collect();
    let mut matrix = vec![vec![0.0; n]; n];
    for (&(i, j), &d) in pairs.iter().zip(&distances) {
        matrix[i][j] = d;
        matrix[j][i] = d;
    }
    Ok(matrix)
}

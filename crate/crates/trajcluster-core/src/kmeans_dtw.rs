//! Time-series K-means under the DTW metric: random-sample initialization,
//! DTW barycenter averaging for center updates, empty-cluster reseeding, and
//! multiple seeded restarts.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CohortDataset;
use crate::dtw::{dtw_distance, dtw_distance_only};
use crate::grid::Grid;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub barycenter_max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    /// Defaults mirror the study's run configuration: 10 random initiations
    /// and 1000 max iterations.
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            n_init: 10,
            max_iter: 1000,
            seed,
            barycenter_max_iter: 30,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    KMeansDtw,
    Crli,
}

/// Final clustering: per-encounter labels plus the centers that produced
/// them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: BTreeMap<String, usize>,
    pub inertia: f64,
    pub centers: Vec<Grid<f64>>,
    pub k: usize,
    pub method: ClusterMethod,
}

impl ClusterAssignment {
    /// Labels in the dataset's encounter order.
    pub fn labels_in_order(&self, ds: &CohortDataset) -> Vec<usize> {
        ds.encounters
            .iter()
            .map(|e| self.labels[&e.encounter_id])
            .collect()
    }

    /// `encounter_id,label` rows, in dataset order when given, else sorted.
    pub fn write_csv<W: Write>(&self, order: Option<&[String]>, mut out: W) -> std::io::Result<()> {
        writeln!(out, "encounter_id,label")?;
        match order {
            Some(ids) => {
                for id in ids {
                    writeln!(out, "{},{}", id, self.labels[id])?;
                }
            }
            None => {
                for (id, label) in &self.labels {
                    writeln!(out, "{id},{label}")?;
                }
            }
        }
        Ok(())
    }

    pub fn metadata_json(&self, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "k": self.k,
            "inertia": self.inertia,
            "seed": seed,
            "method": self.method,
        })
    }
}

#[derive(Debug, Error)]
pub enum KMeansError {
    #[error("k = {k} exceeds the number of encounters ({n})")]
    TooFewSeries { k: usize, n: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("barycenter of an empty member list")]
    EmptyBarycenter,
    #[error("dtw error: {0}")]
    Dtw(#[from] crate::dtw::DtwError),
}

/// DTW barycenter averaging: align every member to the current barycenter,
/// replace each barycenter frame by the mean of the member frames aligned to
/// it, and keep iterating while the summed DTW distance improves by at least
/// `tol`. The best-so-far barycenter is returned, so the summed distance is
/// non-increasing over the refinement.
pub fn dba_barycenter(
    members: &[&Grid<f64>],
    init: &Grid<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<Grid<f64>, KMeansError> {
    if members.is_empty() {
        return Err(KMeansError::EmptyBarycenter);
    }
    if members.len() == 1 {
        return Ok(members[0].clone());
    }
    let d = init.n_features();
    let len = init.n_timesteps();
    let mut barycenter = init.clone();
    let mut best_cost = member_cost(&barycenter, members)?;
    let mut best = barycenter.clone();
    for _ in 0..max_iter {
        let mut sums = vec![0.0; d * len];
        let mut counts = vec![0usize; len];
        for member in members {
            let result = dtw_distance(&barycenter, member)?;
            for &(bi, mi) in &result.path.pairs {
                counts[bi - 1] += 1;
                let frame = member.step(mi - 1);
                for (f, &v) in frame.iter().enumerate() {
                    sums[(bi - 1) * d + f] += v;
                }
            }
        }
        let mut next = Grid::filled(d, len, 0.0);
        for t in 0..len {
            for f in 0..d {
                next.set(f, t, sums[t * d + f] / counts[t] as f64);
            }
        }
        let cost = member_cost(&next, members)?;
        if cost < best_cost {
            let improvement = best_cost - cost;
            best = next.clone();
            best_cost = cost;
            if improvement < tol {
                break;
            }
        } else {
            break;
        }
        barycenter = next;
    }
    Ok(best)
}

fn member_cost(center: &Grid<f64>, members: &[&Grid<f64>]) -> Result<f64, KMeansError> {
    let mut sum = 0.0;
    for m in members {
        sum += dtw_distance_only(center, m)?;
    }
    Ok(sum)
}

fn inertia_of(
    series: &[&Grid<f64>],
    labels: &[usize],
    centers: &[Grid<f64>],
) -> Result<f64, KMeansError> {
    let mut sum = 0.0;
    for (s, &l) in series.iter().zip(labels) {
        sum += dtw_distance_only(&centers[l], s)?;
    }
    Ok(sum)
}

struct RestartState {
    labels: Vec<usize>,
    centers: Vec<Grid<f64>>,
    inertia: f64,
}

fn assign(series: &[&Grid<f64>], centers: &[Grid<f64>]) -> Result<(Vec<usize>, f64), KMeansError> {
    let mut labels = vec![0usize; series.len()];
    let mut inertia = 0.0;
    for (i, s) in series.iter().enumerate() {
        let mut best_c = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = dtw_distance_only(center, s)?;
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        labels[i] = best_c;
        inertia += best_d;
    }
    Ok((labels, inertia))
}

/// Reseed every empty cluster with the series farthest (by DTW) from its
/// currently assigned center; ties break toward the lowest series index.
pub fn reseed_empty_clusters(
    series: &[&Grid<f64>],
    labels: &mut [usize],
    centers: &mut [Grid<f64>],
) -> Result<bool, KMeansError> {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut reseeded = false;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far_idx = 0;
        let mut far_d = f64::NEG_INFINITY;
        for (i, s) in series.iter().enumerate() {
            let d = dtw_distance_only(&centers[labels[i]], s)?;
            if d > far_d {
                far_d = d;
                far_idx = i;
            }
        }
        counts[labels[far_idx]] -= 1;
        labels[far_idx] = c;
        counts[c] = 1;
        centers[c] = series[far_idx].clone();
        reseeded = true;
    }
    Ok(reseeded)
}

fn run_restart(
    series: &[&Grid<f64>],
    cfg: &KMeansConfig,
    restart: usize,
) -> Result<RestartState, KMeansError> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add((restart as u64).wrapping_mul(0x9E3779B97F4A7C15)),
    );
    let init = sample(&mut rng, series.len(), cfg.k).into_vec();
    let mut centers: Vec<Grid<f64>> = init.iter().map(|&i| series[i].clone()).collect();
    let (mut labels, mut inertia) = assign(series, &centers)?;
    if reseed_empty_clusters(series, &mut labels, &mut centers)? {
        inertia = inertia_of(series, &labels, &centers)?;
    }
    for _ in 0..cfg.max_iter {
        // Center update by DBA, seeded from the current centers.
        let mut next_centers = centers.clone();
        for c in 0..cfg.k {
            let members: Vec<&Grid<f64>> = series
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(s, _)| *s)
                .collect();
            if !members.is_empty() {
                next_centers[c] =
                    dba_barycenter(&members, &centers[c], cfg.barycenter_max_iter, cfg.tol)?;
            }
        }
        let (next_labels, next_inertia) = assign(series, &next_centers)?;
        // Keep the monotone best; a non-improving step terminates the restart.
        if next_inertia > inertia + 1e-9 {
            break;
        }
        let stable = next_labels == labels;
        centers = next_centers;
        inertia = next_inertia;
        labels = next_labels;
        if reseed_empty_clusters(series, &mut labels, &mut centers)? {
            // The reseeded singleton sits on its own center, so inertia only
            // decreases; keep the labels rather than re-assigning, which
            // would immediately re-empty the cluster on degenerate inputs.
            inertia = inertia_of(series, &labels, &centers)?;
            continue;
        }
        if stable {
            break;
        }
    }
    Ok(RestartState {
        labels,
        centers,
        inertia,
    })
}

/// Fit K-means under DTW with `cfg.n_init` independent restarts; the restart
/// with minimal inertia wins (ties by restart index). Deterministic for a
/// given `cfg.seed`.
pub fn fit_kmeans_dtw(
    ds: &CohortDataset,
    cfg: &KMeansConfig,
) -> Result<ClusterAssignment, KMeansError> {
    let n = ds.encounters.len();
    if n == 0 {
        return Err(KMeansError::EmptyDataset);
    }
    if cfg.k > n {
        return Err(KMeansError::TooFewSeries { k: cfg.k, n });
    }
    let series: Vec<&Grid<f64>> = ds.encounters.iter().map(|e| &e.values).collect();
    let restarts: Vec<Result<RestartState, KMeansError>> = (0..cfg.n_init)
        .into_par_iter()
        .map(|r| run_restart(&series, cfg, r))
        .collect();
    let mut best: Option<RestartState> = None;
    for state in restarts {
        let state = state?;
        if best.as_ref().map_or(true, |b| state.inertia < b.inertia) {
            best = Some(state);
        }
    }
    let best = best.unwrap();
    let labels = ds
        .encounters
        .iter()
        .zip(&best.labels)
        .map(|(e, &l)| (e.encounter_id.clone(), l))
        .collect();
    Ok(ClusterAssignment {
        labels,
        inertia: best.inertia,
        centers: best.centers,
        k: cfg.k,
        method: ClusterMethod::KMeansDtw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{build_dataset, FeatureSpec, RawObservation};
    use crate::grid::grid_1d;

    /// A one-feature dataset whose encounter series are given directly.
    fn flat_dataset(series: &[Vec<f64>]) -> CohortDataset {
        let features = vec![FeatureSpec::new(
            "HR",
            "bpm",
            -1e9,
            1e9,
            crate::cohort::FillRule::PopulationMedian,
        )];
        let rows: Vec<RawObservation> = series
            .iter()
            .enumerate()
            .flat_map(|(i, values)| {
                let id = format!("E{i:03}");
                values.iter().enumerate().map(move |(t, &v)| RawObservation {
                    encounter_id: id.clone(),
                    patient_id: id.clone(),
                    hour_offset: t as i64 - (values.len() as i64 - 1),
                    feature_idx: 0,
                    value: v,
                })
            })
            .collect();
        build_dataset(features, &rows)
    }

    #[test]
    fn single_cluster_gets_all_labels() {
        let ds = flat_dataset(&[vec![0.0; 6], vec![1.0; 6], vec![2.0; 6]]);
        let fit = fit_kmeans_dtw(&ds, &KMeansConfig::new(1, 3)).unwrap();
        assert!(fit.labels.values().all(|&l| l == 0));
        assert_eq!(fit.centers.len(), 1);
    }

    #[test]
    fn planted_groups_separate_perfectly() {
        let mut series = Vec::new();
        for _ in 0..20 {
            series.push(vec![0.0; 8]);
        }
        for _ in 0..20 {
            series.push(vec![10.0; 8]);
        }
        let ds = flat_dataset(&series);
        let fit = fit_kmeans_dtw(&ds, &KMeansConfig::new(2, 11)).unwrap();
        let labels = fit.labels_in_order(&ds);
        let first = labels[0];
        assert!(labels[..20].iter().all(|&l| l == first));
        assert!(labels[20..].iter().all(|&l| l != first));
        assert!(fit.inertia.abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_config() {
        let series: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..8).map(|t| ((i * 7 + t) as f64 * 0.37).sin()).collect())
            .collect();
        let ds = flat_dataset(&series);
        let cfg = KMeansConfig::new(3, 5);
        let a = fit_kmeans_dtw(&ds, &cfg).unwrap();
        let b = fit_kmeans_dtw(&ds, &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn k_equals_n_zero_inertia() {
        let series: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|t| (i * 6 + t) as f64).collect())
            .collect();
        let ds = flat_dataset(&series);
        let fit = fit_kmeans_dtw(&ds, &KMeansConfig::new(5, 1)).unwrap();
        assert!(fit.inertia.abs() < 1e-12);
    }

    #[test]
    fn k_too_large_rejected() {
        let ds = flat_dataset(&[vec![0.0; 4]]);
        assert!(matches!(
            fit_kmeans_dtw(&ds, &KMeansConfig::new(2, 1)),
            Err(KMeansError::TooFewSeries { k: 2, n: 1 })
        ));
    }

    #[test]
    fn best_restart_not_worse_than_each() {
        let series: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..8).map(|t| ((i * 3 + t) as f64 * 0.71).cos()).collect())
            .collect();
        let ds = flat_dataset(&series);
        let cfg = KMeansConfig::new(3, 9);
        let best = fit_kmeans_dtw(&ds, &cfg).unwrap();
        for restart in 0..cfg.n_init {
            let single = KMeansConfig {
                n_init: 1,
                seed: cfg
                    .seed
                    .wrapping_add((restart as u64).wrapping_mul(0x9E3779B97F4A7C15)),
                ..cfg.clone()
            };
            let one = fit_kmeans_dtw(&ds, &single).unwrap();
            assert!(best.inertia <= one.inertia + 1e-9);
        }
    }

    #[test]
    fn dba_single_member_identity() {
        let member = grid_1d(&[1.0, 2.0, 3.0]);
        let init = grid_1d(&[0.0, 0.0, 0.0]);
        let out = dba_barycenter(&[&member], &init, 30, 1e-6).unwrap();
        assert_eq!(out, member);
    }

    #[test]
    fn dba_identical_members_returns_common_series() {
        let m = grid_1d(&[1.0, 4.0, 2.0]);
        let out = dba_barycenter(&[&m, &m, &m], &m, 30, 1e-6).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn dba_fixed_point_between_two_constants() {
        let a = grid_1d(&[0.0, 0.0, 0.0]);
        let b = grid_1d(&[2.0, 2.0, 2.0]);
        let init = grid_1d(&[1.0, 1.0, 1.0]);
        let out = dba_barycenter(&[&a, &b], &init, 30, 1e-6).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn dba_cost_non_increasing() {
        let members: Vec<Grid<f64>> = (0..5)
            .map(|i| grid_1d(&[(i as f64), 1.0 + i as f64, 0.5 * i as f64, 2.0]))
            .collect();
        let refs: Vec<&Grid<f64>> = members.iter().collect();
        let init = members[0].clone();
        let mut prev_cost = member_cost(&init, &refs).unwrap();
        let mut bary = init;
        for iters in 1..=6 {
            let out = dba_barycenter(&refs, &bary, iters, 0.0).unwrap();
            let cost = member_cost(&out, &refs).unwrap();
            assert!(cost <= prev_cost + 1e-9);
            prev_cost = cost;
            bary = out;
        }
    }

    #[test]
    fn reseed_deterministic_on_degenerate_input() {
        let ds = flat_dataset(&[vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]]);
        let fit = fit_kmeans_dtw(&ds, &KMeansConfig::new(2, 2)).unwrap();
        // All-identical input: one cluster keeps everything except the
        // reseeded singleton; the fit still terminates with zero inertia.
        assert!(fit.inertia.abs() < 1e-12);
        let mut counts = vec![0usize; 2];
        for &l in fit.labels.values() {
            counts[l] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 3);
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn reseed_noop_when_no_empty_clusters() {
        let s = [grid_1d(&[0.0, 0.0]), grid_1d(&[5.0, 5.0])];
        let series: Vec<&Grid<f64>> = s.iter().collect();
        let mut labels = vec![0, 1];
        let mut centers = vec![s[0].clone(), s[1].clone()];
        let changed = reseed_empty_clusters(&series, &mut labels, &mut centers).unwrap();
        assert!(!changed);
        assert_eq!(labels, vec![0, 1]);
    }
}

//! Trajectory preprocessing: outlier rejection against physiologic ranges,
//! forward/backward/median imputation, length normalization to a fixed 24
//! points, pooled z-standardization, and deterministic encounter shuffling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortDataset, EncounterSeries, FillRule};

pub const TARGET_TIMESTEPS: usize = 24;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("feature `{0}` is entirely missing across the cohort; population median undefined")]
    MedianUndefined(String),
    #[error("encounter `{0}` has a zero-length series")]
    ZeroLengthSeries(String),
}

/// Per-feature accounting of what preprocessing changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureCounts {
    pub rejected_outliers: usize,
    pub forward_filled: usize,
    pub backward_filled: usize,
    pub median_filled_series: usize,
    pub padding_cells: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub per_feature: Vec<(String, FeatureCounts)>,
}

impl PreprocessReport {
    fn for_features(ds: &CohortDataset) -> Self {
        PreprocessReport {
            per_feature: ds
                .features
                .iter()
                .map(|f| (f.name.clone(), FeatureCounts::default()))
                .collect(),
        }
    }

    pub fn merge(mut self, other: &PreprocessReport) -> PreprocessReport {
        for ((_, a), (_, b)) in self.per_feature.iter_mut().zip(&other.per_feature) {
            a.rejected_outliers += b.rejected_outliers;
            a.forward_filled += b.forward_filled;
            a.backward_filled += b.backward_filled;
            a.median_filled_series += b.median_filled_series;
            a.padding_cells += b.padding_cells;
        }
        self
    }
}

/// Pooled per-feature standardization parameters (population standard
/// deviation, computed over non-padded cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationParams {
    /// Map a standardized value back to the original scale.
    pub fn inverse(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Mark cells outside each feature's accepted range as missing; the
/// provenance mask is cleared for them so they are treated as unobserved.
pub fn reject_outliers(ds: &CohortDataset) -> (CohortDataset, PreprocessReport) {
    let mut out = ds.clone();
    let mut report = PreprocessReport::for_features(ds);
    for enc in &mut out.encounters {
        for f in 0..out.features.len() {
            let spec = &out.features[f];
            for t in 0..enc.values.n_timesteps() {
                let v = enc.values.get(f, t);
                if v.is_finite() && (v < spec.valid_min || v > spec.valid_max) {
                    enc.values.set(f, t, f64::NAN);
                    enc.observed_mask.set(f, t, false);
                    report.per_feature[f].1.rejected_outliers += 1;
                }
            }
        }
    }
    (out, report)
}

/// Population median of a feature over all non-missing cells in the cohort.
fn population_median(ds: &CohortDataset, feature: usize) -> Option<f64> {
    let mut values: Vec<f64> = ds
        .encounters
        .iter()
        .flat_map(|e| e.values.feature_series(feature))
        .filter(|v| v.is_finite())
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Three-step imputation, per feature per encounter: forward fill, then
/// backward fill, then population-median (or constant) fill for series that
/// are entirely missing. The provenance mask is left untouched.
pub fn impute(ds: &CohortDataset) -> Result<(CohortDataset, PreprocessReport), PreprocessError> {
    let mut out = ds.clone();
    let mut report = PreprocessReport::for_features(ds);
    // Medians are computed from the pre-fill state of the whole cohort.
    let medians: Vec<Option<f64>> = (0..ds.features.len())
        .map(|f| population_median(ds, f))
        .collect();
    for enc in &mut out.encounters {
        let len = enc.values.n_timesteps();
        for f in 0..out.features.len() {
            let mut series = enc.values.feature_series(f);
            let all_missing = series.iter().all(|v| !v.is_finite());
            if all_missing {
                let fill = match &out.features[f].fully_missing_fill {
                    FillRule::Constant(c) => *c,
                    FillRule::PopulationMedian => medians[f]
                        .ok_or_else(|| PreprocessError::MedianUndefined(out.features[f].name.clone()))?,
                };
                for t in 0..len {
                    enc.values.set(f, t, fill);
                }
                report.per_feature[f].1.median_filled_series += 1;
                continue;
            }
            // Forward fill.
            let mut last = f64::NAN;
            for (t, v) in series.iter_mut().enumerate() {
                if v.is_finite() {
                    last = *v;
                } else if last.is_finite() {
                    *v = last;
                    report.per_feature[f].1.forward_filled += 1;
                    enc.values.set(f, t, last);
                }
            }
            // Backward fill (only leading gaps can remain).
            let mut next = f64::NAN;
            for t in (0..len).rev() {
                if series[t].is_finite() {
                    next = series[t];
                } else if next.is_finite() {
                    series[t] = next;
                    report.per_feature[f].1.backward_filled += 1;
                    enc.values.set(f, t, next);
                }
            }
        }
    }
    Ok((out, report))
}

/// Normalize one encounter to `target` timesteps: shorter series get copies
/// of their first value prepended (provenance mask false on the padding),
/// longer series keep their most recent `target` points.
pub fn normalize_length(
    series: &EncounterSeries,
    target: usize,
) -> Result<EncounterSeries, PreprocessError> {
    let len = series.values.n_timesteps();
    if len == 0 {
        return Err(PreprocessError::ZeroLengthSeries(series.encounter_id.clone()));
    }
    let mut out = series.clone();
    if len < target {
        let add = target - len;
        out.values = series.values.prepend_first(add);
        let d = series.observed_mask.n_features();
        let mut mask = crate::grid::Grid::filled(d, target, false);
        for t in 0..len {
            for f in 0..d {
                mask.set(f, t + add, series.observed_mask.get(f, t));
            }
        }
        out.observed_mask = mask;
        out.padding_steps = series.padding_steps + add;
    } else if len > target {
        out.values = series.values.slice_timesteps(len - target, len);
        out.observed_mask = series.observed_mask.slice_timesteps(len - target, len);
        out.padding_steps = 0;
    }
    Ok(out)
}

/// Normalize every encounter in the dataset to `target` timesteps.
pub fn normalize_lengths(
    ds: &CohortDataset,
    target: usize,
) -> Result<(CohortDataset, PreprocessReport), PreprocessError> {
    let mut out = ds.clone();
    let mut report = PreprocessReport::for_features(ds);
    for enc in &mut out.encounters {
        let before = enc.values.n_timesteps();
        *enc = normalize_length(enc, target)?;
        if before < target {
            for (_, counts) in &mut report.per_feature {
                counts.padding_cells += target - before;
            }
        }
    }
    Ok((out, report))
}

/// Pooled z-standardization, z = (f - mu) / sigma with population sigma.
/// Statistics exclude padded cells; constant features (sigma = 0) map to all
/// zeros.
pub fn standardize(ds: &CohortDataset) -> (CohortDataset, StandardizationParams) {
    let d = ds.features.len();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for f in 0..d {
        let mut sum = 0.0;
        let mut count = 0usize;
        for enc in &ds.encounters {
            for t in enc.padding_steps..enc.values.n_timesteps() {
                sum += enc.values.get(f, t);
                count += 1;
            }
        }
        let mu = if count > 0 { sum / count as f64 } else { 0.0 };
        let mut ss = 0.0;
        for enc in &ds.encounters {
            for t in enc.padding_steps..enc.values.n_timesteps() {
                let dv = enc.values.get(f, t) - mu;
                ss += dv * dv;
            }
        }
        mean[f] = mu;
        std[f] = if count > 0 { (ss / count as f64).sqrt() } else { 0.0 };
    }
    let mut out = ds.clone();
    for enc in &mut out.encounters {
        for f in 0..d {
            for t in 0..enc.values.n_timesteps() {
                let z = if std[f] > 0.0 {
                    (enc.values.get(f, t) - mean[f]) / std[f]
                } else {
                    0.0
                };
                enc.values.set(f, t, z);
            }
        }
    }
    (out, StandardizationParams { mean, std })
}

/// Deterministic permutation of encounter order; attached maps are unchanged.
pub fn shuffle(ds: &CohortDataset, seed: u64) -> CohortDataset {
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.encounters.shuffle(&mut rng);
    out
}

/// The full preprocessing path in the order the study applies it: outlier
/// rejection, imputation, length normalization, standardization, shuffle.
pub fn preprocess_pipeline(
    ds: &CohortDataset,
    seed: u64,
) -> Result<(CohortDataset, PreprocessReport, StandardizationParams), PreprocessError> {
    let (ds, r1) = reject_outliers(ds);
    let (ds, r2) = impute(&ds)?;
    let (ds, r3) = normalize_lengths(&ds, TARGET_TIMESTEPS)?;
    let (ds, params) = standardize(&ds);
    let ds = shuffle(&ds, seed);
    Ok((ds, r1.merge(&r2).merge(&r3), params))
}

//! Cohort data model: feature specifications, per-encounter trajectory
//! matrices with observation provenance, outcomes, diagnoses, and the
//! long-format CSV ingestion that pivots raw observations into them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

/// How a feature series that is entirely missing for an encounter is filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FillRule {
    PopulationMedian,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub unit: String,
    pub valid_min: f64,
    pub valid_max: f64,
    pub fully_missing_fill: FillRule,
}

impl FeatureSpec {
    pub fn new(name: &str, unit: &str, valid_min: f64, valid_max: f64, fill: FillRule) -> Self {
        assert!(valid_min < valid_max, "valid_min must be below valid_max");
        FeatureSpec {
            name: name.to_string(),
            unit: unit.to_string(),
            valid_min,
            valid_max,
            fully_missing_fill: fill,
        }
    }

    /// The six cardio-respiratory clustering features with their default
    /// accepted physiologic ranges. FiO2 falls back to room air (0.21) when a
    /// series is entirely missing; the rest use the population median.
    pub fn canonical_six() -> Vec<FeatureSpec> {
        let units: BTreeMap<&str, &str> = [
            ("PaO2", "mmHg"),
            ("PaCO2", "mmHg"),
            ("FiO2", "fraction"),
            ("SpO2", "%"),
            ("HR", "bpm"),
            ("MAP", "mmHg"),
        ]
        .into_iter()
        .collect();
        let ranges = parse_range_table(include_str!("../data/feature_ranges.csv"))
            .expect("bundled range table is valid");
        let order = ["PaO2", "PaCO2", "FiO2", "SpO2", "HR", "MAP"];
        order
            .iter()
            .map(|&name| {
                let (lo, hi) = ranges[name];
                let fill = if name == "FiO2" {
                    FillRule::Constant(0.21)
                } else {
                    FillRule::PopulationMedian
                };
                FeatureSpec::new(name, units[name], lo, hi, fill)
            })
            .collect()
    }
}

/// Parse an outlier-range table (`feature,valid_min,valid_max`).
pub fn parse_range_table(text: &str) -> Result<BTreeMap<String, (f64, f64)>, CohortError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CohortError::Parse {
                line: i + 1,
                message: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let lo: f64 = parts[1].trim().parse().map_err(|_| CohortError::Parse {
            line: i + 1,
            message: format!("bad valid_min `{}`", parts[1]),
        })?;
        let hi: f64 = parts[2].trim().parse().map_err(|_| CohortError::Parse {
            line: i + 1,
            message: format!("bad valid_max `{}`", parts[2]),
        })?;
        if lo >= hi {
            return Err(CohortError::Parse {
                line: i + 1,
                message: format!("valid_min {lo} not below valid_max {hi}"),
            });
        }
        out.insert(parts[0].trim().to_string(), (lo, hi));
    }
    Ok(out)
}

/// Load an outlier-range table from disk and apply it to a feature list.
pub fn apply_range_table(
    features: &mut [FeatureSpec],
    path: &Path,
) -> Result<(), CohortError> {
    let text = std::fs::read_to_string(path)?;
    let table = parse_range_table(&text)?;
    for spec in features.iter_mut() {
        if let Some(&(lo, hi)) = table.get(&spec.name) {
            spec.valid_min = lo;
            spec.valid_max = hi;
        }
    }
    Ok(())
}

/// One encounter's trajectory. `values` holds NaN in missing cells until
/// imputation completes; `observed_mask` records which cells came from raw
/// observations and is never touched by imputation or padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterSeries {
    pub encounter_id: String,
    pub patient_id: String,
    pub values: Grid<f64>,
    pub observed_mask: Grid<bool>,
    /// Number of leading timesteps that were prepended by length
    /// normalization (excluded from standardization statistics).
    pub padding_steps: usize,
}

/// Time-to-event within a fixed observation window, right-censored at the
/// window edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time_days: f64,
    pub event: bool,
    pub window_days: f64,
}

impl SurvivalRecord {
    /// Truncate a raw death/censoring time into the window: anything past the
    /// window becomes a censored record at the window edge.
    pub fn truncated(raw_time_days: f64, died: bool, window_days: f64) -> Self {
        assert!(raw_time_days >= 0.0 && window_days > 0.0);
        if raw_time_days > window_days {
            SurvivalRecord {
                time_days: window_days,
                event: false,
                window_days,
            }
        } else {
            SurvivalRecord {
                time_days: raw_time_days,
                event: died,
                window_days,
            }
        }
    }
}

/// ICD-10 code set plus age; comorbidity flags are derived on demand from the
/// bundled mapping table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComorbidityProfile {
    pub icd10_codes: BTreeSet<String>,
    pub age_years: f64,
}

/// Optional auxiliary trajectories for post-hoc summaries, keyed by feature
/// name then encounter id.
pub type AuxFeatures = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub features: Vec<FeatureSpec>,
    pub encounters: Vec<EncounterSeries>,
    pub outcomes: BTreeMap<String, SurvivalRecord>,
    pub diagnoses: BTreeMap<String, ComorbidityProfile>,
    pub aux_features: AuxFeatures,
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown feature names: {}", .0.join(", "))]
    UnknownFeatures(Vec<String>),
    #[error("line {line}: hour_offset {value} outside [-23, 0]")]
    HourOffsetOutOfRange { line: usize, value: i64 },
    #[error("no outcome record for encounter `{0}`")]
    MissingOutcome(String),
    #[error("negative time_to_death_days for encounter `{0}`")]
    NegativeTime(String),
    #[error("no age/diagnosis rows for encounter `{0}`")]
    MissingAge(String),
    #[error("negative age for encounter `{0}`")]
    NegativeAge(String),
    #[error("conflicting ages for encounter `{0}`")]
    InconsistentAge(String),
    #[error("duplicate encounter id `{0}`")]
    DuplicateEncounter(String),
    #[error("encounters do not share a uniform timestep count")]
    NonUniformTimesteps,
}

/// One raw long-format observation, already resolved to a feature index.
#[derive(Debug, Clone)]
pub struct RawObservation {
    pub encounter_id: String,
    pub patient_id: String,
    pub hour_offset: i64,
    pub feature_idx: usize,
    pub value: f64,
}

pub fn feature_index(features: &[FeatureSpec], name: &str) -> Option<usize> {
    features.iter().position(|f| f.name == name)
}

/// Ingest long-format observations
/// (`encounter_id,patient_id,hour_offset,feature,value`) into one trajectory
/// matrix per encounter. Multiple observations in the same hourly bin are
/// reduced to their mean; an empty value field is treated as no observation.
pub fn ingest_long_csv(
    path: &Path,
    features: &[FeatureSpec],
) -> Result<CohortDataset, CohortError> {
    let text = std::fs::read_to_string(path)?;
    ingest_long_str(&text, features)
}

pub fn ingest_long_str(
    text: &str,
    features: &[FeatureSpec],
) -> Result<CohortDataset, CohortError> {
    let mut rows = Vec::new();
    let mut unknown: BTreeSet<String> = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if i == 0 {
            let header = line.trim();
            if header != "encounter_id,patient_id,hour_offset,feature,value" {
                return Err(CohortError::Parse {
                    line: 1,
                    message: format!("unexpected header `{header}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CohortError::Parse {
                line: line_no,
                message: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let hour_offset: i64 = parts[2].trim().parse().map_err(|_| CohortError::Parse {
            line: line_no,
            message: format!("bad hour_offset `{}`", parts[2]),
        })?;
        if !(-23..=0).contains(&hour_offset) {
            return Err(CohortError::HourOffsetOutOfRange {
                line: line_no,
                value: hour_offset,
            });
        }
        let feature_idx = match feature_index(features, parts[3].trim()) {
            Some(idx) => idx,
            None => {
                unknown.insert(parts[3].trim().to_string());
                continue;
            }
        };
        let value_field = parts[4].trim();
        if value_field.is_empty() {
            // Missing value: the row carries no observation.
            continue;
        }
        let value: f64 = value_field.parse().map_err(|_| CohortError::Parse {
            line: line_no,
            message: format!("bad value `{value_field}`"),
        })?;
        if !value.is_finite() {
            return Err(CohortError::Parse {
                line: line_no,
                message: format!("non-finite value `{value_field}`"),
            });
        }
        rows.push(RawObservation {
            encounter_id: parts[0].trim().to_string(),
            patient_id: parts[1].trim().to_string(),
            hour_offset,
            feature_idx,
            value,
        });
    }
    if !unknown.is_empty() {
        return Err(CohortError::UnknownFeatures(unknown.into_iter().collect()));
    }
    Ok(build_dataset(features.to_vec(), &rows))
}

/// Pivot raw observations into per-encounter matrices. Encounter order is
/// the first-seen order of the rows; each matrix spans from the encounter's
/// earliest observed hour through hour 0.
pub fn build_dataset(features: Vec<FeatureSpec>, rows: &[RawObservation]) -> CohortDataset {
    let d = features.len();
    let mut order: Vec<String> = Vec::new();
    let mut patient: HashMap<String, String> = HashMap::new();
    // (encounter, feature, hour) -> (sum, count)
    let mut bins: HashMap<(String, usize, i64), (f64, usize)> = HashMap::new();
    let mut earliest: HashMap<String, i64> = HashMap::new();
    for row in rows {
        if !patient.contains_key(&row.encounter_id) {
            order.push(row.encounter_id.clone());
            patient.insert(row.encounter_id.clone(), row.patient_id.clone());
        }
        let entry = bins
            .entry((row.encounter_id.clone(), row.feature_idx, row.hour_offset))
            .or_insert((0.0, 0));
        entry.0 += row.value;
        entry.1 += 1;
        let e = earliest.entry(row.encounter_id.clone()).or_insert(0);
        *e = (*e).min(row.hour_offset);
    }
    let encounters = order
        .iter()
        .map(|id| {
            let start = earliest[id];
            let len = (-start + 1) as usize;
            let mut values = Grid::filled(d, len, f64::NAN);
            let mut mask = Grid::filled(d, len, false);
            for f in 0..d {
                for hour in start..=0 {
                    if let Some(&(sum, count)) = bins.get(&(id.clone(), f, hour)) {
                        let t = (hour - start) as usize;
                        values.set(f, t, sum / count as f64);
                        mask.set(f, t, true);
                    }
                }
            }
            EncounterSeries {
                encounter_id: id.clone(),
                patient_id: patient[id].clone(),
                values,
                observed_mask: mask,
                padding_steps: 0,
            }
        })
        .collect();
    CohortDataset {
        features,
        encounters,
        outcomes: BTreeMap::new(),
        diagnoses: BTreeMap::new(),
        aux_features: BTreeMap::new(),
    }
}

/// Write the observed (mask-true) cells back out in the long format; the
/// round trip through `ingest_long_str` reproduces the binned means.
pub fn export_long_csv<W: Write>(ds: &CohortDataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "encounter_id,patient_id,hour_offset,feature,value")?;
    for enc in &ds.encounters {
        let len = enc.values.n_timesteps() as i64;
        for t in 0..enc.values.n_timesteps() {
            for f in 0..ds.features.len() {
                if enc.observed_mask.get(f, t) {
                    let hour = t as i64 - (len - 1);
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        enc.encounter_id,
                        enc.patient_id,
                        hour,
                        ds.features[f].name,
                        enc.values.get(f, t)
                    )?;
                }
            }
        }
    }
    Ok(())
}

impl CohortDataset {
    pub fn encounter_ids(&self) -> Vec<String> {
        self.encounters.iter().map(|e| e.encounter_id.clone()).collect()
    }

    /// Attach survival outcomes from `encounter_id,time_to_death_days,died`,
    /// truncating/censoring at a 28-day window.
    pub fn attach_outcomes(self, path: &Path) -> Result<CohortDataset, CohortError> {
        let text = std::fs::read_to_string(path)?;
        self.attach_outcomes_str(&text)
    }

    pub fn attach_outcomes_str(mut self, text: &str) -> Result<CohortDataset, CohortError> {
        const WINDOW_DAYS: f64 = 28.0;
        let mut records: BTreeMap<String, SurvivalRecord> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if i == 0 {
                let header = line.trim();
                if header != "encounter_id,time_to_death_days,died" {
                    return Err(CohortError::Parse {
                        line: 1,
                        message: format!("unexpected header `{header}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(CohortError::Parse {
                    line: line_no,
                    message: format!("expected 3 fields, got {}", parts.len()),
                });
            }
            let id = parts[0].trim().to_string();
            let time: f64 = parts[1].trim().parse().map_err(|_| CohortError::Parse {
                line: line_no,
                message: format!("bad time_to_death_days `{}`", parts[1]),
            })?;
            if time < 0.0 {
                return Err(CohortError::NegativeTime(id));
            }
            let died = match parts[2].trim().to_ascii_lowercase().as_str() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(CohortError::Parse {
                        line: line_no,
                        message: format!("bad died flag `{other}`"),
                    })
                }
            };
            records.insert(id, SurvivalRecord::truncated(time, died, WINDOW_DAYS));
        }
        for enc in &self.encounters {
            if !records.contains_key(&enc.encounter_id) {
                return Err(CohortError::MissingOutcome(enc.encounter_id.clone()));
            }
        }
        self.outcomes = records;
        Ok(self)
    }

    /// Attach diagnoses from `encounter_id,age_years,icd10_code` (one code per
    /// row; an empty code field records age only).
    pub fn attach_diagnoses(self, path: &Path) -> Result<CohortDataset, CohortError> {
        let text = std::fs::read_to_string(path)?;
        self.attach_diagnoses_str(&text)
    }

    pub fn attach_diagnoses_str(mut self, text: &str) -> Result<CohortDataset, CohortError> {
        let mut profiles: BTreeMap<String, ComorbidityProfile> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if i == 0 {
                let header = line.trim();
                if header != "encounter_id,age_years,icd10_code" {
                    return Err(CohortError::Parse {
                        line: 1,
                        message: format!("unexpected header `{header}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(CohortError::Parse {
                    line: line_no,
                    message: format!("expected 3 fields, got {}", parts.len()),
                });
            }
            let id = parts[0].trim().to_string();
            let age: f64 = parts[1].trim().parse().map_err(|_| CohortError::Parse {
                line: line_no,
                message: format!("bad age_years `{}`", parts[1]),
            })?;
            if age < 0.0 {
                return Err(CohortError::NegativeAge(id));
            }
            let entry = profiles.entry(id.clone()).or_insert(ComorbidityProfile {
                icd10_codes: BTreeSet::new(),
                age_years: age,
            });
            if (entry.age_years - age).abs() > 1e-9 {
                return Err(CohortError::InconsistentAge(id));
            }
            let code = parts[2].trim();
            if !code.is_empty() {
                entry.icd10_codes.insert(code.to_string());
            }
        }
        for enc in &self.encounters {
            if !profiles.contains_key(&enc.encounter_id) {
                return Err(CohortError::MissingAge(enc.encounter_id.clone()));
            }
        }
        self.diagnoses = profiles;
        Ok(self)
    }

    /// Check the structural invariants: unique encounter ids, an outcome per
    /// encounter, and a uniform timestep count.
    pub fn validate(&self) -> Result<(), CohortError> {
        let mut seen = BTreeSet::new();
        for enc in &self.encounters {
            if !seen.insert(&enc.encounter_id) {
                return Err(CohortError::DuplicateEncounter(enc.encounter_id.clone()));
            }
            if !self.outcomes.contains_key(&enc.encounter_id) {
                return Err(CohortError::MissingOutcome(enc.encounter_id.clone()));
            }
        }
        if let Some(first) = self.encounters.first() {
            let t = first.values.n_timesteps();
            if self
                .encounters
                .iter()
                .any(|e| e.values.n_timesteps() != t)
            {
                return Err(CohortError::NonUniformTimesteps);
            }
        }
        Ok(())
    }
}

//! Synthetic ICU cohorts with planted trajectory phenotypes: per-template
//! feature trajectories in physical units, realistic missingness (MCAR plus
//! sparse lab sampling), exponential survival, and enriched ICD-10 codes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    build_dataset, CohortDataset, ComorbidityProfile, FeatureSpec, RawObservation, SurvivalRecord,
};

const OUTCOME_WINDOW_DAYS: f64 = 28.0;
const SPAN_HOURS: usize = 24;
/// Feature indices in the canonical order PaO2, PaCO2, FiO2, SpO2, HR, MAP.
const LAB_FEATURES: [usize; 2] = [0, 1];
const SUB_SEED_STRIDE: u64 = 0x9E3779B97F4A7C15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("missing_rate must be in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("n_per must be positive")]
    ZeroCohort,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean trajectory plus noise for one feature: linear trend from `baseline`
/// with optional slope change at `changepoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGen {
    pub baseline: f64,
    pub slope: f64,
    pub changepoint: Option<(usize, f64)>,
    pub noise_sd: f64,
}

impl FeatureGen {
    pub fn flat(baseline: f64, noise_sd: f64) -> Self {
        FeatureGen {
            baseline,
            slope: 0.0,
            changepoint: None,
            noise_sd,
        }
    }

    pub fn trend(baseline: f64, slope: f64, noise_sd: f64) -> Self {
        FeatureGen {
            baseline,
            slope,
            changepoint: None,
            noise_sd,
        }
    }

    /// Noise-free mean at timestep `t` in [0, 24).
    pub fn mean_at(&self, t: usize) -> f64 {
        match self.changepoint {
            Some((cp, late_slope)) if t > cp => {
                self.baseline + self.slope * cp as f64 + late_slope * (t - cp) as f64
            }
            _ => self.baseline + self.slope * t as f64,
        }
    }
}

/// One planted phenotype: per-feature generators (canonical feature order),
/// a per-day death hazard, and comorbidity enrichment probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeTemplate {
    pub name: String,
    pub features: Vec<FeatureGen>,
    pub hazard_rate: f64,
    pub comorbidity_enrichment: BTreeMap<String, f64>,
}

/// Representative ICD-10 code emitted for each enrichment component.
fn enrichment_code(component: &str) -> &'static str {
    match component {
        "chronic_pulmonary_disease" => "J44.9",
        "mild_liver_disease" => "K70.3",
        "cardiac_arrest" => "I46.9",
        "congestive_heart_failure" => "I50.9",
        "renal_disease" => "N18.3",
        "diabetes_without_complication" => "E11.9",
        _ => "R69",
    }
}

/// The four default templates. Mortality ordering is part of the contract:
/// MODS > hypoxemia > heterogeneous > hypercapnia.
pub fn default_templates() -> Vec<PhenotypeTemplate> {
    let enrich = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    };
    vec![
        PhenotypeTemplate {
            name: "hypoxemia".into(),
            features: vec![
                FeatureGen::trend(85.0, -1.0, 5.0),         // PaO2
                FeatureGen::flat(40.0, 3.0),                // PaCO2
                FeatureGen::trend(0.35, 0.02, 0.03),        // FiO2
                FeatureGen::trend(96.0, -0.6, 1.2),         // SpO2
                FeatureGen::trend(95.0, 0.4, 5.0),          // HR
                FeatureGen::flat(72.0, 5.0),                // MAP
            ],
            hazard_rate: 0.02,
            comorbidity_enrichment: enrich(&[
                ("congestive_heart_failure", 0.3),
                ("diabetes_without_complication", 0.2),
            ]),
        },
        PhenotypeTemplate {
            name: "hypercapnia".into(),
            features: vec![
                FeatureGen::flat(70.0, 5.0),                // PaO2
                FeatureGen::trend(55.0, 0.85, 3.0),         // PaCO2
                FeatureGen::flat(0.40, 0.03),               // FiO2
                FeatureGen::flat(92.0, 1.2),                // SpO2
                FeatureGen::flat(90.0, 5.0),                // HR
                FeatureGen::flat(75.0, 5.0),                // MAP
            ],
            hazard_rate: 0.008,
            comorbidity_enrichment: enrich(&[
                ("chronic_pulmonary_disease", 0.5),
                ("diabetes_without_complication", 0.2),
            ]),
        },
        PhenotypeTemplate {
            name: "mods".into(),
            features: vec![
                FeatureGen::trend(65.0, -0.4, 5.0),         // PaO2
                FeatureGen::flat(45.0, 3.0),                // PaCO2
                FeatureGen::trend(0.60, 0.012, 0.03),       // FiO2
                FeatureGen::trend(90.0, -0.25, 1.2),        // SpO2
                FeatureGen::trend(110.0, 1.1, 5.0),         // HR
                FeatureGen::trend(75.0, -1.1, 5.0),         // MAP
            ],
            hazard_rate: 0.035,
            comorbidity_enrichment: enrich(&[
                ("cardiac_arrest", 0.4),
                ("renal_disease", 0.3),
                ("congestive_heart_failure", 0.2),
            ]),
        },
        PhenotypeTemplate {
            name: "heterogeneous".into(),
            features: vec![
                FeatureGen::flat(90.0, 6.0),                // PaO2
                FeatureGen::flat(40.0, 3.0),                // PaCO2
                FeatureGen::flat(0.30, 0.04),               // FiO2
                FeatureGen::flat(96.0, 1.5),                // SpO2
                FeatureGen::flat(85.0, 7.0),                // HR
                FeatureGen::flat(80.0, 6.0),                // MAP
            ],
            hazard_rate: 0.015,
            comorbidity_enrichment: enrich(&[
                ("mild_liver_disease", 0.4),
                ("diabetes_without_complication", 0.2),
            ]),
        },
    ]
}

/// Everything generated for one synthetic encounter, before assembly into a
/// CohortDataset or CSV files.
#[derive(Debug, Clone)]
struct SynthEncounter {
    encounter_id: String,
    observations: Vec<RawObservation>,
    time_to_death_days: f64,
    died: bool,
    age_years: f64,
    icd10_codes: Vec<String>,
    label: usize,
}

/// A generated cohort plus ground-truth phenotype labels.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub features: Vec<FeatureSpec>,
    encounters: Vec<SynthEncounter>,
    pub template_names: Vec<String>,
}

fn generate_encounter(
    template: &PhenotypeTemplate,
    label: usize,
    index: usize,
    missing_rate: f64,
    seed: u64,
) -> SynthEncounter {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((index as u64 + 1).wrapping_mul(SUB_SEED_STRIDE)),
    );
    let encounter_id = format!("SYN{index:05}");
    let patient_id = format!("PT{index:05}");
    // ~30% of encounters have a shorter observation span (12..24 hours),
    // always ending at hour 0.
    let span = if rng.gen_bool(0.3) {
        rng.gen_range(12..SPAN_HOURS)
    } else {
        SPAN_HOURS
    };
    // Labs are drawn on a sparse grid: one observation every 4-8 hours.
    let lab_interval = rng.gen_range(4..=8usize);
    let lab_phase = rng.gen_range(0..lab_interval);
    let mut observations = Vec::new();
    for (f, gen) in template.features.iter().enumerate() {
        let noise = Normal::new(0.0, gen.noise_sd.max(1e-12)).unwrap();
        for step in (SPAN_HOURS - span)..SPAN_HOURS {
            let is_lab = LAB_FEATURES.contains(&f);
            if is_lab && step % lab_interval != lab_phase {
                continue;
            }
            if rng.gen_bool(missing_rate) {
                continue;
            }
            let value = gen.mean_at(step) + noise.sample(&mut rng);
            observations.push(RawObservation {
                encounter_id: encounter_id.clone(),
                patient_id: patient_id.clone(),
                hour_offset: step as i64 - (SPAN_HOURS as i64 - 1),
                feature_idx: f,
                value,
            });
        }
    }
    // Occasional physically impossible spike, exercising outlier rejection.
    if rng.gen_bool(0.05) && !observations.is_empty() {
        let i = rng.gen_range(0..observations.len());
        observations[i].value = match observations[i].feature_idx {
            0 => 900.0,  // PaO2 above range
            1 => 260.0,  // PaCO2 above range
            2 => 1.8,    // FiO2 above range
            3 => 130.0,  // SpO2 above range
            4 => 350.0,  // HR above range
            _ => 300.0,  // MAP above range
        };
    }
    // Every encounter carries at least one observation.
    if observations.is_empty() {
        observations.push(RawObservation {
            encounter_id: encounter_id.clone(),
            patient_id: patient_id.clone(),
            hour_offset: 0,
            feature_idx: 4,
            value: template.features[4].mean_at(SPAN_HOURS - 1),
        });
    }
    // Exponential survival under the template hazard, censored at 28 days.
    let raw_time = if template.hazard_rate > 0.0 {
        -(1.0 - rng.gen::<f64>()).ln() / template.hazard_rate
    } else {
        f64::INFINITY
    };
    let died = raw_time <= OUTCOME_WINDOW_DAYS;
    let time_to_death_days = if died { raw_time } else { OUTCOME_WINDOW_DAYS };
    let age_sample: f64 = Normal::new(62.0, 15.0).unwrap().sample(&mut rng);
    let age_years = age_sample.clamp(18.0, 100.0);
    let mut icd10_codes = Vec::new();
    for (component, &prob) in &template.comorbidity_enrichment {
        if rng.gen_bool(prob) {
            icd10_codes.push(enrichment_code(component).to_string());
        }
    }
    SynthEncounter {
        encounter_id,
        observations,
        time_to_death_days,
        died,
        age_years,
        icd10_codes,
        label,
    }
}

/// Generate `n_per` encounters per template, deterministic given `seed`.
pub fn generate(
    templates: &[PhenotypeTemplate],
    n_per: usize,
    missing_rate: f64,
    seed: u64,
) -> Result<SynthCohort, SynthError> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(SynthError::InvalidRate(missing_rate));
    }
    if n_per == 0 || templates.is_empty() {
        return Err(SynthError::ZeroCohort);
    }
    let encounters: Vec<SynthEncounter> = (0..templates.len() * n_per)
        .into_par_iter()
        .map(|index| {
            let label = index / n_per;
            generate_encounter(&templates[label], label, index, missing_rate, seed)
        })
        .collect();
    Ok(SynthCohort {
        features: FeatureSpec::canonical_six(),
        encounters,
        template_names: templates.iter().map(|t| t.name.clone()).collect(),
    })
}

impl SynthCohort {
    pub fn n_encounters(&self) -> usize {
        self.encounters.len()
    }

    /// Ground-truth template index per encounter id.
    pub fn true_labels(&self) -> BTreeMap<String, usize> {
        self.encounters
            .iter()
            .map(|e| (e.encounter_id.clone(), e.label))
            .collect()
    }

    /// Assemble an in-memory CohortDataset with outcomes and diagnoses
    /// attached, bypassing the CSV round trip.
    pub fn to_dataset(&self) -> CohortDataset {
        let rows: Vec<RawObservation> = self
            .encounters
            .iter()
            .flat_map(|e| e.observations.iter().cloned())
            .collect();
        let mut ds = build_dataset(self.features.clone(), &rows);
        for e in &self.encounters {
            ds.outcomes.insert(
                e.encounter_id.clone(),
                SurvivalRecord::truncated(e.time_to_death_days, e.died, OUTCOME_WINDOW_DAYS),
            );
            ds.diagnoses.insert(
                e.encounter_id.clone(),
                ComorbidityProfile {
                    icd10_codes: e.icd10_codes.iter().cloned().collect(),
                    age_years: e.age_years,
                },
            );
        }
        ds
    }

    pub fn observations_csv(&self) -> String {
        let mut out = String::from("encounter_id,patient_id,hour_offset,feature,value\n");
        for e in &self.encounters {
            for obs in &e.observations {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    obs.encounter_id,
                    obs.patient_id,
                    obs.hour_offset,
                    self.features[obs.feature_idx].name,
                    obs.value
                ));
            }
        }
        out
    }

    pub fn outcomes_csv(&self) -> String {
        let mut out = String::from("encounter_id,time_to_death_days,died\n");
        for e in &self.encounters {
            out.push_str(&format!(
                "{},{},{}\n",
                e.encounter_id, e.time_to_death_days, e.died
            ));
        }
        out
    }

    pub fn diagnoses_csv(&self) -> String {
        let mut out = String::from("encounter_id,age_years,icd10_code\n");
        for e in &self.encounters {
            if e.icd10_codes.is_empty() {
                out.push_str(&format!("{},{},\n", e.encounter_id, e.age_years));
            } else {
                for code in &e.icd10_codes {
                    out.push_str(&format!("{},{},{}\n", e.encounter_id, e.age_years, code));
                }
            }
        }
        out
    }

    pub fn true_labels_csv(&self) -> String {
        let mut out = String::from("encounter_id,label,template\n");
        for e in &self.encounters {
            out.push_str(&format!(
                "{},{},{}\n",
                e.encounter_id, e.label, self.template_names[e.label]
            ));
        }
        out
    }

    /// Write the four CSV files cohort ingestion expects, plus ground truth.
    pub fn write_to_dir(&self, dir: &std::path::Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("observations.csv"), self.observations_csv())?;
        std::fs::write(dir.join("outcomes.csv"), self.outcomes_csv())?;
        std::fs::write(dir.join("diagnoses.csv"), self.diagnoses_csv())?;
        std::fs::write(dir.join("true_labels.csv"), self.true_labels_csv())?;
        Ok(())
    }

    /// Total observation rows, for summary printing.
    pub fn n_observations(&self) -> usize {
        self.encounters.iter().map(|e| e.observations.len()).sum()
    }
}

//! Phenotype characterization statistics: Kaplan-Meier curves, the
//! multigroup log-rank test, one-way ANOVA, two-proportion z-tests, 83.4%
//! confidence trajectory bands, and the Quan ICD-10 Charlson index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortDataset, ComorbidityProfile, SurvivalRecord};
use crate::special::{chi_square_sf, f_sf, normal_quantile, normal_sf};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty survival record list")]
    EmptyRecords,
    #[error("log-rank needs at least 2 nonempty groups, got {0}")]
    TooFewGroups(usize),
    #[error("ANOVA needs >= 2 groups with >= 2 values each")]
    DegenerateAnova,
    #[error("two-proportion z-test needs n >= 1 and x <= n")]
    InvalidProportion,
    #[error("labels missing encounter `{0}`")]
    MissingLabel(String),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("malformed weight table line {line}: {message}")]
    WeightTable { line: usize, message: String },
}

/// Product-limit survival curve for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub group: String,
    pub event_times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
}

impl KmCurve {
    /// S(t): survival probability at time `t` (step function, right-continuous).
    pub fn survival_at(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for (time, surv) in self.event_times.iter().zip(&self.survival) {
            if *time <= t {
                s = *surv;
            } else {
                break;
            }
        }
        s
    }
}

/// Kaplan-Meier product-limit estimator. Censored records leave the risk set
/// after their time (ties between a death and a censoring at the same time
/// count the censored subject as still at risk for that death).
pub fn km_curve(records: &[SurvivalRecord], group: &str) -> Result<KmCurve, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptyRecords);
    }
    let mut event_times: Vec<f64> = records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time_days)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.dedup();
    let mut survival = Vec::with_capacity(event_times.len());
    let mut at_risk = Vec::with_capacity(event_times.len());
    let mut deaths = Vec::with_capacity(event_times.len());
    let mut s = 1.0;
    for &t in &event_times {
        let n = records.iter().filter(|r| r.time_days >= t).count();
        let d = records
            .iter()
            .filter(|r| r.event && r.time_days == t)
            .count();
        s *= 1.0 - d as f64 / n as f64;
        at_risk.push(n);
        deaths.push(d);
        survival.push(s);
    }
    Ok(KmCurve {
        group: group.to_string(),
        event_times,
        survival,
        at_risk,
        deaths,
    })
}

/// Multigroup log-rank test: the quadratic form of the first k-1 group
/// O-E vectors against the hypergeometric variance-covariance, with
/// df = k-1. No events at all gives (0, df, 1) by convention.
pub fn logrank_test(groups: &[Vec<SurvivalRecord>]) -> Result<(f64, usize, f64), StatsError> {
    let k = groups.len();
    if k < 2 || groups.iter().any(|g| g.is_empty()) {
        return Err(StatsError::TooFewGroups(k));
    }
    let df = k - 1;
    let mut event_times: Vec<f64> = groups
        .iter()
        .flatten()
        .filter(|r| r.event)
        .map(|r| r.time_days)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.dedup();
    if event_times.is_empty() {
        return Ok((0.0, df, 1.0));
    }
    // O - E per group (first k-1), and the covariance of the O - E vector.
    let mut diff = vec![0.0; df];
    let mut cov = vec![0.0; df * df];
    for &t in &event_times {
        let n_per: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.time_days >= t).count() as f64)
            .collect();
        let d_per: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.event && r.time_days == t).count() as f64)
            .collect();
        let n: f64 = n_per.iter().sum();
        let d: f64 = d_per.iter().sum();
        if d == 0.0 || n <= 1.0 {
            continue;
        }
        let hyper = d * (n - d) / (n - 1.0);
        for g in 0..df {
            diff[g] += d_per[g] - d * n_per[g] / n;
            for h in 0..df {
                let delta = if g == h { n_per[g] / n } else { 0.0 };
                cov[g * df + h] += hyper * (delta - n_per[g] * n_per[h] / (n * n));
            }
        }
    }
    let stat = quadratic_form(&diff, &cov, df).max(0.0);
    Ok((stat, df, chi_square_sf(stat, df)))
}

/// x' V^{-1} x via Gauss-Jordan with partial pivoting; near-singular pivots
/// drop their dimension (the corresponding contrast carries no information).
fn quadratic_form(x: &[f64], v: &[f64], n: usize) -> f64 {
    let mut a = v.to_vec();
    let mut b = x.to_vec();
    let scale = a
        .iter()
        .fold(0.0f64, |m, &c| m.max(c.abs()))
        .max(1e-300);
    let mut used = vec![false; n];
    for _ in 0..n {
        // Largest remaining diagonal pivot.
        let mut piv = usize::MAX;
        let mut best = 1e-12 * scale;
        for (i, &u) in used.iter().enumerate() {
            if !u && a[i * n + i].abs() > best {
                best = a[i * n + i].abs();
                piv = i;
            }
        }
        if piv == usize::MAX {
            break;
        }
        used[piv] = true;
        let p = a[piv * n + piv];
        for j in 0..n {
            a[piv * n + j] /= p;
        }
        b[piv] /= p;
        for i in 0..n {
            if i != piv {
                let factor = a[i * n + piv];
                if factor != 0.0 {
                    for j in 0..n {
                        a[i * n + j] -= factor * a[piv * n + j];
                    }
                    b[i] -= factor * b[piv];
                }
            }
        }
    }
    x.iter()
        .zip(&b)
        .zip(&used)
        .filter(|(_, &u)| u)
        .map(|((&xi, &bi), _)| xi * bi)
        .sum()
}

/// Classic one-way ANOVA: F = MSbetween / MSwithin, p from the F upper tail.
pub fn anova_oneway(samples: &[Vec<f64>]) -> Result<(f64, f64), StatsError> {
    let k = samples.len();
    if k < 2 || samples.iter().any(|s| s.len() < 2) {
        return Err(StatsError::DegenerateAnova);
    }
    let n_total: usize = samples.iter().map(|s| s.len()).sum();
    let grand: f64 = samples.iter().flatten().sum::<f64>() / n_total as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for s in samples {
        let mean: f64 = s.iter().sum::<f64>() / s.len() as f64;
        ssb += s.len() as f64 * (mean - grand) * (mean - grand);
        ssw += s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    let df1 = k - 1;
    let df2 = n_total - k;
    if df2 == 0 {
        return Err(StatsError::DegenerateAnova);
    }
    let msb = ssb / df1 as f64;
    let msw = ssw / df2 as f64;
    if msw == 0.0 {
        // All groups internally constant: identical means give F = 0, any
        // separation is infinitely significant.
        return Ok(if msb == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        });
    }
    let f = msb / msw;
    Ok((f, f_sf(f, df1, df2)))
}

/// Pooled two-proportion z-test, two-sided.
pub fn two_proportion_ztest(
    x1: usize,
    n1: usize,
    x2: usize,
    n2: usize,
) -> Result<(f64, f64), StatsError> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(StatsError::InvalidProportion);
    }
    let p1 = x1 as f64 / n1 as f64;
    let p2 = x2 as f64 / n2 as f64;
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = (p1 - p2) / se;
    Ok((z, 2.0 * normal_sf(z.abs())))
}

/// Per-timestep mean with a symmetric 83.4% confidence half-width, used for
/// visual significance comparison between cluster trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBand {
    pub feature: String,
    pub cluster: usize,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
    pub n: Vec<usize>,
    /// False when the cluster had n < 2: the mean is emitted, the band is not.
    pub band_defined: bool,
}

/// Confidence level for the trajectory bands (non-overlap approximates a
/// pairwise test at p < 0.05).
pub const BAND_CONFIDENCE: f64 = 0.834;

/// Standard-normal quantile used for the 83.4% band half-width.
pub fn band_quantile() -> f64 {
    normal_quantile((1.0 + BAND_CONFIDENCE) / 2.0)
}

/// Mean +/- q * SD/sqrt(n) per cluster per timestep for one feature.
pub fn trajectory_bands(
    ds: &CohortDataset,
    labels: &BTreeMap<String, usize>,
    feature: usize,
) -> Result<Vec<TrajectoryBand>, StatsError> {
    let q = band_quantile();
    let feature_name = ds.features[feature].name.clone();
    let mut clusters: BTreeMap<usize, Vec<&crate::cohort::EncounterSeries>> = BTreeMap::new();
    for enc in &ds.encounters {
        let &label = labels
            .get(&enc.encounter_id)
            .ok_or_else(|| StatsError::MissingLabel(enc.encounter_id.clone()))?;
        clusters.entry(label).or_default().push(enc);
    }
    let mut bands = Vec::with_capacity(clusters.len());
    for (cluster, members) in clusters {
        let steps = members
            .iter()
            .map(|e| e.values.n_timesteps())
            .max()
            .unwrap_or(0);
        let mut mean = Vec::with_capacity(steps);
        let mut half_width = Vec::with_capacity(steps);
        let mut n_per = Vec::with_capacity(steps);
        let band_defined = members.len() >= 2;
        for t in 0..steps {
            let values: Vec<f64> = members
                .iter()
                .filter(|e| t < e.values.n_timesteps())
                .map(|e| e.values.get(feature, t))
                .collect();
            let n = values.len();
            let mu = values.iter().sum::<f64>() / n as f64;
            let hw = if n >= 2 {
                let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
                q * var.sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            mean.push(mu);
            half_width.push(hw);
            n_per.push(n);
        }
        bands.push(TrajectoryBand {
            feature: feature_name.clone(),
            cluster,
            mean,
            half_width,
            n: n_per,
            band_defined,
        });
    }
    Ok(bands)
}

/// One Charlson component: name, matching ICD-10 prefixes, integer weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharlsonComponent {
    pub name: String,
    pub icd10_prefixes: Vec<String>,
    pub weight: u32,
}

/// The Quan ICD-10 component table with Quan (2011) weights, loaded from a
/// bundled data file so clinical users can substitute their own table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharlsonWeights {
    pub components: Vec<CharlsonComponent>,
}

/// (suppressed, suppressor): a milder component contributes nothing when its
/// severe counterpart is present.
const HIERARCHY: [(&str, &str); 3] = [
    ("mild_liver_disease", "moderate_severe_liver_disease"),
    ("diabetes_without_complication", "diabetes_with_complication"),
    ("malignancy", "metastatic_solid_tumor"),
];

impl CharlsonWeights {
    /// The table shipped with the crate.
    pub fn bundled() -> CharlsonWeights {
        Self::parse(include_str!("../data/quan_icd10_weights.csv"))
            .expect("bundled weight table is well-formed")
    }

    /// Parse `component,icd10_prefixes(semicolon-separated),weight`.
    pub fn parse(text: &str) -> Result<CharlsonWeights, StatsError> {
        let mut components = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, ',').collect();
            if parts.len() != 3 {
                return Err(StatsError::WeightTable {
                    line: idx + 1,
                    message: "expected 3 comma-separated fields".into(),
                });
            }
            let weight = parts[2].trim().parse::<u32>().map_err(|e| StatsError::WeightTable {
                line: idx + 1,
                message: format!("bad weight: {e}"),
            })?;
            components.push(CharlsonComponent {
                name: parts[0].trim().to_string(),
                icd10_prefixes: parts[1]
                    .split(';')
                    .map(|p| normalize_code(p))
                    .filter(|p| !p.is_empty())
                    .collect(),
                weight,
            });
        }
        Ok(CharlsonWeights { components })
    }
}

fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|c| *c != '.')
        .collect::<String>()
        .to_ascii_uppercase()
}

fn age_points(age_years: f64) -> u32 {
    match age_years {
        a if a >= 80.0 => 4,
        a if a >= 70.0 => 3,
        a if a >= 60.0 => 2,
        a if a >= 50.0 => 1,
        _ => 0,
    }
}

/// Charlson comorbidity index (CCI) and its age-adjusted variant (ACCI) for
/// one profile: prefix-match component flags, apply the suppression
/// hierarchy, sum weights, add age points.
pub fn charlson(
    profile: &ComorbidityProfile,
    weights: &CharlsonWeights,
) -> (u32, u32, BTreeMap<String, bool>) {
    let codes: Vec<String> = profile.icd10_codes.iter().map(|c| normalize_code(c)).collect();
    let mut flags: BTreeMap<String, bool> = BTreeMap::new();
    for comp in &weights.components {
        let present = codes
            .iter()
            .any(|c| comp.icd10_prefixes.iter().any(|p| c.starts_with(p.as_str())));
        flags.insert(comp.name.clone(), present);
    }
    let mut scored = flags.clone();
    for (suppressed, suppressor) in HIERARCHY {
        if scored.get(suppressor).copied().unwrap_or(false) {
            if let Some(flag) = scored.get_mut(suppressed) {
                *flag = false;
            }
        }
    }
    let cci: u32 = weights
        .components
        .iter()
        .filter(|c| scored[&c.name])
        .map(|c| c.weight)
        .sum();
    let acci = cci + age_points(profile.age_years);
    (cci, acci, flags)
}

/// Proportion of encounters in each cluster with each component flag set.
pub fn charlson_component_rates(
    profiles: &BTreeMap<String, ComorbidityProfile>,
    labels: &BTreeMap<String, usize>,
    weights: &CharlsonWeights,
) -> Result<BTreeMap<usize, BTreeMap<String, f64>>, StatsError> {
    let mut counts: BTreeMap<usize, (usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for (id, profile) in profiles {
        let &label = labels
            .get(id)
            .ok_or_else(|| StatsError::MissingLabel(id.clone()))?;
        let (_, _, flags) = charlson(profile, weights);
        let entry = counts.entry(label).or_insert_with(|| (0, BTreeMap::new()));
        entry.0 += 1;
        for (name, present) in flags {
            *entry.1.entry(name).or_insert(0) += usize::from(present);
        }
    }
    let mut rates = BTreeMap::new();
    for (label, (n, per_component)) in counts {
        if n == 0 {
            return Err(StatsError::EmptyCluster(label));
        }
        rates.insert(
            label,
            per_component
                .into_iter()
                .map(|(name, c)| (name, c as f64 / n as f64))
                .collect(),
        );
    }
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rec(t: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord {
            time_days: t,
            event,
            window_days: 28.0,
        }
    }

    #[test]
    fn km_hand_example() {
        let records = vec![
            rec(5.0, false),
            rec(6.0, true),
            rec(6.0, true),
            rec(8.0, false),
            rec(10.0, true),
        ];
        let curve = km_curve(&records, "g").unwrap();
        assert_eq!(curve.event_times, vec![6.0, 10.0]);
        assert_eq!(curve.at_risk, vec![4, 1]);
        assert_eq!(curve.deaths, vec![2, 1]);
        assert_eq!(curve.survival, vec![0.5, 0.0]);
        assert_eq!(curve.survival_at(5.0), 1.0);
        assert_eq!(curve.survival_at(7.0), 0.5);
        assert_eq!(curve.survival_at(28.0), 0.0);
    }

    #[test]
    fn km_no_deaths_flat_one() {
        let records = vec![rec(28.0, false); 5];
        let curve = km_curve(&records, "g").unwrap();
        assert!(curve.event_times.is_empty());
        assert_eq!(curve.survival_at(28.0), 1.0);
    }

    #[test]
    fn km_everyone_dies_at_one() {
        let records = vec![rec(1.0, true); 4];
        let curve = km_curve(&records, "g").unwrap();
        assert_eq!(curve.survival, vec![0.0]);
    }

    #[test]
    fn km_product_recomputable_and_trailing_censor_inert() {
        let mut records = vec![rec(2.0, true), rec(3.0, false), rec(5.0, true), rec(9.0, true)];
        let curve = km_curve(&records, "g").unwrap();
        let mut s = 1.0;
        for ((&n, &d), &stored) in curve.at_risk.iter().zip(&curve.deaths).zip(&curve.survival) {
            s *= 1.0 - d as f64 / n as f64;
            assert!((s - stored).abs() < 1e-12);
        }
        records.push(rec(20.0, false));
        let with_censor = km_curve(&records, "g").unwrap();
        // A censored record after the last event adds no step to the curve; it
        // enlarges every risk set, so S can only move up, never down.
        assert_eq!(curve.event_times, with_censor.event_times);
        assert_eq!(curve.deaths, with_censor.deaths);
        for (&before, &after) in curve.survival.iter().zip(&with_censor.survival) {
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn logrank_identical_groups_p_one() {
        let g = vec![rec(3.0, true), rec(7.0, false), rec(12.0, true)];
        let (stat, df, p) = logrank_test(&[g.clone(), g]).unwrap();
        assert!(stat.abs() < 1e-12);
        assert_eq!(df, 1);
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logrank_forced_separation() {
        // All of A dies at t=1, all of B censored at 28 (n=20 each): the
        // single event time gives O-E = 10 and variance 100/39, so the
        // statistic is exactly 39.
        let a = vec![rec(1.0, true); 20];
        let b = vec![rec(28.0, false); 20];
        let (stat, df, p) = logrank_test(&[a, b]).unwrap();
        assert!((stat - 39.0).abs() < 1e-9, "stat = {stat}");
        assert_eq!(df, 1);
        assert!(p < 1e-3);
    }

    #[test]
    fn logrank_invariant_under_group_order() {
        let a = vec![rec(1.0, true), rec(4.0, true), rec(9.0, false)];
        let b = vec![rec(2.0, false), rec(6.0, true), rec(28.0, false)];
        let c = vec![rec(3.0, true), rec(28.0, false), rec(28.0, false)];
        let (s1, df1, p1) = logrank_test(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let (s2, df2, p2) = logrank_test(&[c, a, b]).unwrap();
        assert!((s1 - s2).abs() < 1e-9);
        assert_eq!(df1, df2);
        assert!((p1 - p2).abs() < 1e-9);
        assert!(s1 >= 0.0 && p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn logrank_no_events_convention() {
        let a = vec![rec(28.0, false); 3];
        let b = vec![rec(28.0, false); 3];
        let (stat, _, p) = logrank_test(&[a, b]).unwrap();
        assert_eq!(stat, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn anova_hand_example() {
        let (f, p) = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((f - 13.5).abs() < 1e-9);
        assert!(p > 0.0 && p < 0.05);
    }

    #[test]
    fn anova_identical_groups() {
        let (f, p) = anova_oneway(&[vec![2.0, 2.0, 2.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn anova_forced_separation() {
        let a = vec![0.0, 1e-6, 0.0, 1e-6];
        let b = vec![10.0, 10.0 + 1e-6, 10.0, 10.0 + 1e-6];
        let (_, p) = anova_oneway(&[a, b]).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn ztest_equal_and_antisymmetric() {
        let (z, p) = two_proportion_ztest(5, 20, 10, 40).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(p, 1.0);
        let (z1, _) = two_proportion_ztest(30, 100, 10, 100).unwrap();
        let (z2, _) = two_proportion_ztest(10, 100, 30, 100).unwrap();
        assert!((z1 + z2).abs() < 1e-12);
    }

    #[test]
    fn ztest_cardiac_arrest_rates() {
        // 37.44% of 195 vs 15.32% of 1638.
        let (_, p) = two_proportion_ztest(73, 195, 251, 1638).unwrap();
        assert!(p < 1e-5);
    }

    #[test]
    fn band_quantile_matches_expected() {
        assert!((band_quantile() - 1.3852).abs() < 5e-4);
    }

    fn band_dataset(series: &[Vec<f64>]) -> (CohortDataset, BTreeMap<String, usize>) {
        use crate::cohort::{build_dataset, FeatureSpec, FillRule, RawObservation};
        let features = vec![FeatureSpec::new("HR", "bpm", -1e9, 1e9, FillRule::PopulationMedian)];
        let rows: Vec<RawObservation> = series
            .iter()
            .enumerate()
            .flat_map(|(i, values)| {
                let id = format!("E{i}");
                values.iter().enumerate().map(move |(t, &v)| RawObservation {
                    encounter_id: id.clone(),
                    patient_id: id.clone(),
                    hour_offset: t as i64 - (values.len() as i64 - 1),
                    feature_idx: 0,
                    value: v,
                })
            })
            .collect();
        let ds = build_dataset(features, &rows);
        let labels = ds
            .encounters
            .iter()
            .enumerate()
            .map(|(i, e)| (e.encounter_id.clone(), i / 2))
            .collect();
        (ds, labels)
    }

    #[test]
    fn bands_zero_width_for_identical_series() {
        let (ds, labels) = band_dataset(&[
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![5.0, 5.0],
            vec![7.0, 7.0],
        ]);
        let bands = trajectory_bands(&ds, &labels, 0).unwrap();
        assert_eq!(bands.len(), 2);
        assert!(bands[0].band_defined);
        assert!(bands[0].half_width.iter().all(|&w| w == 0.0));
        assert!(bands[1].half_width.iter().all(|&w| w > 0.0));
        assert_eq!(bands[0].mean, vec![1.0, 2.0]);
    }

    #[test]
    fn bands_scale_with_inverse_sqrt_n() {
        // Same per-timestep sample SD, n = 2 vs n = 8: half-width halves.
        let two: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0]];
        let eight: Vec<Vec<f64>> = (0..8).map(|i| vec![(i % 2) as f64 * 2.0]).collect();
        let (ds2, l2) = {
            let (ds, _) = band_dataset(&two);
            let labels = ds.encounters.iter().map(|e| (e.encounter_id.clone(), 0)).collect();
            (ds, labels)
        };
        let (ds8, l8) = {
            let (ds, _) = band_dataset(&eight);
            let labels = ds.encounters.iter().map(|e| (e.encounter_id.clone(), 0)).collect();
            (ds, labels)
        };
        let b2 = trajectory_bands(&ds2, &l2, 0).unwrap();
        let b8 = trajectory_bands(&ds8, &l8, 0).unwrap();
        // Sample SD is the same (about 1.069 both ways here the SD differs
        // slightly) -- compare hw * sqrt(n) / sd instead, which must match q.
        let q = band_quantile();
        let sd2 = 2.0f64.sqrt(); // sample SD of {0, 2}
        let sd8 = (8.0 / 7.0f64).sqrt(); // sample SD of {0,2}x4
        assert!((b2[0].half_width[0] - q * sd2 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((b8[0].half_width[0] - q * sd8 / 8.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bands_singleton_cluster_flagged() {
        let (ds, _) = band_dataset(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]);
        let labels: BTreeMap<String, usize> = ds
            .encounters
            .iter()
            .enumerate()
            .map(|(i, e)| (e.encounter_id.clone(), usize::from(i == 2)))
            .collect();
        let bands = trajectory_bands(&ds, &labels, 0).unwrap();
        assert!(bands[0].band_defined);
        assert!(!bands[1].band_defined);
        assert_eq!(bands[1].mean, vec![9.0, 9.0]);
    }

    fn profile(codes: &[&str], age: f64) -> ComorbidityProfile {
        ComorbidityProfile {
            icd10_codes: codes.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>(),
            age_years: age,
        }
    }

    #[test]
    fn charlson_empty_codes_zero() {
        let w = CharlsonWeights::bundled();
        let (cci, acci, flags) = charlson(&profile(&[], 30.0), &w);
        assert_eq!(cci, 0);
        assert_eq!(acci, 0);
        assert!(flags.values().all(|&v| !v));
    }

    #[test]
    fn charlson_chf_plus_copd() {
        let w = CharlsonWeights::bundled();
        let (cci, _, flags) = charlson(&profile(&["I50.9", "J44.9"], 40.0), &w);
        assert!(flags["congestive_heart_failure"]);
        assert!(flags["chronic_pulmonary_disease"]);
        assert_eq!(cci, 3);
    }

    #[test]
    fn charlson_age_rule() {
        let w = CharlsonWeights::bundled();
        // CCI 3 (CHF 2 + COPD 1), age 67 -> +2.
        let (cci, acci, _) = charlson(&profile(&["I50.9", "J44.9"], 67.0), &w);
        assert_eq!(cci, 3);
        assert_eq!(acci, 5);
        for (age, pts) in [(49.9, 0), (50.0, 1), (59.9, 1), (60.0, 2), (79.9, 3), (80.0, 4)] {
            let (c, a, _) = charlson(&profile(&["I50.9"], age), &w);
            assert_eq!(a - c, pts, "age {age}");
        }
    }

    #[test]
    fn charlson_liver_hierarchy() {
        let w = CharlsonWeights::bundled();
        // Mild (K70.3) + moderate/severe (K72.1): only the severe weight (4).
        let (cci, _, flags) = charlson(&profile(&["K70.3", "K72.1"], 30.0), &w);
        assert!(flags["mild_liver_disease"]);
        assert!(flags["moderate_severe_liver_disease"]);
        assert_eq!(cci, 4);
        // Diabetes hierarchy and metastatic hierarchy likewise.
        let (cci, _, _) = charlson(&profile(&["E11.9", "E11.2"], 30.0), &w);
        assert_eq!(cci, 1);
        let (cci, _, _) = charlson(&profile(&["C34.9", "C78.0"], 30.0), &w);
        assert_eq!(cci, 6);
    }

    #[test]
    fn charlson_code_normalization() {
        let w = CharlsonWeights::bundled();
        let (with_dot, _, _) = charlson(&profile(&["i50.9"], 30.0), &w);
        let (without, _, _) = charlson(&profile(&["I509"], 30.0), &w);
        assert_eq!(with_dot, without);
        assert_eq!(with_dot, 2);
    }

    #[test]
    fn component_rates_full_and_bounded() {
        let w = CharlsonWeights::bundled();
        let mut profiles = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for i in 0..4 {
            let id = format!("E{i}");
            profiles.insert(id.clone(), profile(&["J44.9"], 60.0));
            labels.insert(id, 0usize);
        }
        profiles.insert("E4".into(), profile(&[], 60.0));
        labels.insert("E4".into(), 1usize);
        let rates = charlson_component_rates(&profiles, &labels, &w).unwrap();
        assert_eq!(rates[&0]["chronic_pulmonary_disease"], 1.0);
        assert_eq!(rates[&1]["chronic_pulmonary_disease"], 0.0);
        for per in rates.values() {
            assert!(per.values().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }

    #[test]
    fn weight_table_parse_errors() {
        assert!(matches!(
            CharlsonWeights::parse("component,icd10_prefixes,weight\nfoo,I21\n"),
            Err(StatsError::WeightTable { line: 2, .. })
        ));
        assert!(matches!(
            CharlsonWeights::parse("component,icd10_prefixes,weight\nfoo,I21,notanumber\n"),
            Err(StatsError::WeightTable { line: 2, .. })
        ));
    }
}

//! Acceptance gate: nine criteria covering oracle equivalence, gradient
//! correctness, planted-phenotype recovery, survival statistics, and
//! end-to-end determinism. Each test prints one `CRITERION n: PASS/FAIL`
//! line; tolerances are pinned next to the assertions they guard.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajcluster_core::cluster_eval::{
    adjusted_rand_index, euclidean_distance_matrix, select_k, silhouette, DistanceKind,
};
use trajcluster_core::cohort::{
    CohortDataset, ComorbidityProfile, EncounterSeries, FeatureSpec, FillRule, SurvivalRecord,
};
use trajcluster_core::crli;
use trajcluster_core::dtw::{dtw_distance, dtw_distance_bruteforce};
use trajcluster_core::grid::{grid_1d, Grid};
use trajcluster_core::kmeans_dtw::{fit_kmeans_dtw, KMeansConfig};
use trajcluster_core::outcome_stats::{
    anova_oneway, charlson, km_curve, logrank_test, CharlsonWeights,
};
use trajcluster_core::preprocess::{impute, preprocess_pipeline};
use trajcluster_core::synth::{default_templates, generate};

fn report(criterion: usize, ok: bool) {
    println!("CRITERION {criterion}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed");
}

// ---------------------------------------------------------------------------
// Criterion 1: DTW equals the exhaustive-path oracle.
// ---------------------------------------------------------------------------

fn all_series(max_len: usize, values: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        let mut stack: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..len {
            let mut next = Vec::with_capacity(stack.len() * values.len());
            for prefix in &stack {
                for &v in values {
                    let mut s = prefix.clone();
                    s.push(v);
                    next.push(s);
                }
            }
            stack = next;
        }
        out.extend(stack);
    }
    out
}

#[test]
fn criterion_1_dtw_oracle_equivalence() {
    // Exhaustive sweep: every unordered pair of 1-feature integer series,
    // lengths <= 6, values {0,1,2} (DTW is symmetric, so unordered pairs
    // cover the full cross product).
    let series: Vec<Grid<f64>> = all_series(6, &[0.0, 1.0, 2.0])
        .into_iter()
        .map(|s| grid_1d(&s))
        .collect();
    let mut ok = true;
    for i in 0..series.len() {
        for j in i..series.len() {
            let fast = dtw_distance(&series[i], &series[j]).unwrap().distance;
            let brute = dtw_distance_bruteforce(&series[i], &series[j]).unwrap();
            if fast != brute {
                eprintln!("mismatch at pair ({i}, {j}): {fast} vs {brute}");
                ok = false;
            }
        }
    }
    // 200 random 2-feature pairs, lengths <= 6.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let make = |rng: &mut ChaCha8Rng| {
            let t = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..2 * t).map(|_| rng.gen_range(-3.0..3.0)).collect();
            Grid::from_time_major(2, t, data)
        };
        let x = make(&mut rng);
        let y = make(&mut rng);
        let fast = dtw_distance(&x, &y).unwrap().distance;
        let brute = dtw_distance_bruteforce(&x, &y).unwrap();
        if (fast - brute).abs() > 1e-12 {
            eprintln!("random pair mismatch: {fast} vs {brute}");
            ok = false;
        }
    }
    report(1, ok);
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

fn tiny_dataset(n: usize, t: usize, d: usize, seed: u64) -> CohortDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..d)
        .map(|i| FeatureSpec::new(&format!("f{i}"), "unit", -100.0, 100.0, FillRule::Constant(0.0)))
        .collect();
    let encounters = (0..n)
        .map(|i| EncounterSeries {
            encounter_id: format!("E{i}"),
            patient_id: format!("P{i}"),
            values: Grid::from_time_major(d, t, (0..d * t).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            observed_mask: Grid::from_time_major(d, t, (0..d * t).map(|_| rng.gen_bool(0.7)).collect()),
            padding_steps: 0,
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

#[test]
fn criterion_2_gradient_check() {
    let ds = tiny_dataset(8, 6, 2, 42);
    let mut cfg = crli::CrliConfig::new(2, 42);
    cfg.latent_dim = 5;
    cfg.gen_hidden = Some(5);
    cfg.disc_hidden = Some(1);
    let max_rel = crli::gradient_check(&ds, &cfg).unwrap();
    eprintln!("max relative gradient error: {max_rel:.3e}");
    report(2, max_rel < 1e-4);
}

// ---------------------------------------------------------------------------
// Criterion 3: planted-phenotype recovery and model selection.
// ---------------------------------------------------------------------------

fn planted_cohort(seed: u64) -> (CohortDataset, Vec<usize>) {
    let cohort = generate(&default_templates(), 100, 0.3, seed).unwrap();
    let truth_map = cohort.true_labels();
    let ds = cohort.to_dataset();
    let (pre, _, _) = preprocess_pipeline(&ds, seed).unwrap();
    let truth: Vec<usize> = pre.encounters.iter().map(|e| truth_map[&e.encounter_id]).collect();
    (pre, truth)
}

#[test]
fn criterion_3_planted_phenotype_recovery() {
    let (pre, truth) = planted_cohort(7);
    let mut ok = true;

    // CRLI at the pinned desk configuration.
    let mut crli_cfg = crli::CrliConfig::new(4, 7);
    crli_cfg.latent_dim = 32;
    crli_cfg.max_epochs = 2000;
    crli_cfg.patience = 50;
    let crli_result = crli::train(&pre, &crli_cfg).unwrap();
    let crli_ari =
        adjusted_rand_index(&crli_result.assignment.labels_in_order(&pre), &truth).unwrap();
    eprintln!(
        "crli: {} epochs, ari {crli_ari:.4}",
        crli_result.loss_history.len()
    );
    ok &= crli_ari >= 0.8;

    // K-means under DTW. Restarts are reduced from the analysis default to
    // keep the sweep inside the acceptance time budget.
    let mut km_cfg = KMeansConfig::new(4, 7);
    km_cfg.n_init = 3;
    km_cfg.barycenter_max_iter = 10;
    let km = fit_kmeans_dtw(&pre, &km_cfg).unwrap();
    let km_ari = adjusted_rand_index(&km.labels_in_order(&pre), &truth).unwrap();
    eprintln!("kmeans-dtw ari {km_ari:.4}");
    ok &= km_ari >= 0.8;

    // Silhouette-based selection over {3,4,5} across 10 clustering seeds.
    let series: Vec<Grid<f64>> = pre.encounters.iter().map(|e| e.values.clone()).collect();
    let dtw = trajcluster_core::dtw::pairwise_dtw(&series).unwrap();
    let mut hits = 0;
    for seed in 0..10u64 {
        let mut reports = BTreeMap::new();
        for k in [3usize, 4, 5] {
            let mut cfg = KMeansConfig::new(k, seed);
            cfg.n_init = 3;
            cfg.barycenter_max_iter = 10;
            let assignment = fit_kmeans_dtw(&pre, &cfg).unwrap();
            let rep = silhouette(
                &dtw,
                &assignment.labels_in_order(&pre),
                DistanceKind::DtwOnSeries,
            )
            .unwrap();
            reports.insert(k, rep);
        }
        if select_k(&reports).unwrap() == 4 {
            hits += 1;
        }
    }
    eprintln!("select_k chose 4 in {hits}/10 seeds");
    ok &= hits >= 8;
    report(3, ok);
}

// ---------------------------------------------------------------------------
// Criterion 4: survival separation on recovered clusters.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_survival_separation() {
    let (pre, truth) = planted_cohort(7);
    let mut km_cfg = KMeansConfig::new(4, 7);
    km_cfg.n_init = 3;
    km_cfg.barycenter_max_iter = 10;
    let assignment = fit_kmeans_dtw(&pre, &km_cfg).unwrap();
    let labels = assignment.labels_in_order(&pre);

    let mut groups: Vec<Vec<SurvivalRecord>> = vec![Vec::new(); 4];
    for (e, &label) in pre.encounters.iter().zip(&labels) {
        groups[label].push(pre.outcomes[&e.encounter_id].clone());
    }
    let (_, _, p) = logrank_test(&groups).unwrap();
    eprintln!("log-rank p = {p:.3e}");
    let mut ok = p < 0.005;

    // The recovered cluster dominated by the MODS template (planted label 2)
    // must have the lowest Kaplan-Meier survival at day 28.
    let mut mods_votes = vec![0usize; 4];
    for (&label, &t) in labels.iter().zip(&truth) {
        if t == 2 {
            mods_votes[label] += 1;
        }
    }
    let mods_cluster = mods_votes
        .iter()
        .enumerate()
        .max_by_key(|&(_, v)| *v)
        .unwrap()
        .0;
    let survival_28: Vec<f64> = groups
        .iter()
        .enumerate()
        .map(|(c, records)| km_curve(records, &format!("c{c}")).unwrap().survival_at(28.0))
        .collect();
    eprintln!("S(28) per cluster: {survival_28:?}, MODS-analog = {mods_cluster}");
    let min = survival_28
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    ok &= survival_28[mods_cluster] == min;
    report(4, ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: KM / log-rank / ANOVA hand oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_survival_oracles() {
    let mut ok = true;

    // {5+, 6, 6, 8+, 10}: S(6) = 1 * (1 - 2/4) = 0.5, S(10) = 0.5 * (1 - 1/1) = 0.
    let records = vec![
        SurvivalRecord { time_days: 5.0, event: false, window_days: 28.0 },
        SurvivalRecord { time_days: 6.0, event: true, window_days: 28.0 },
        SurvivalRecord { time_days: 6.0, event: true, window_days: 28.0 },
        SurvivalRecord { time_days: 8.0, event: false, window_days: 28.0 },
        SurvivalRecord { time_days: 10.0, event: true, window_days: 28.0 },
    ];
    let curve = km_curve(&records, "hand").unwrap();
    ok &= curve.survival_at(6.0) == 0.5;
    ok &= curve.survival_at(10.0) == 0.0;
    ok &= curve.event_times == vec![6.0, 10.0];

    // Two identical groups: no separation, p = 1.
    let group = vec![
        SurvivalRecord { time_days: 2.0, event: true, window_days: 28.0 },
        SurvivalRecord { time_days: 9.0, event: true, window_days: 28.0 },
        SurvivalRecord { time_days: 15.0, event: false, window_days: 28.0 },
    ];
    let (stat, df, p) = logrank_test(&[group.clone(), group]).unwrap();
    ok &= stat.abs() < 1e-12 && df == 1 && p == 1.0;

    // ANOVA {1,2,3} vs {4,5,6}: F = 13.5.
    let (f, _) = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    ok &= (f - 13.5).abs() < 1e-9;
    report(5, ok);
}

// ---------------------------------------------------------------------------
// Criterion 6: silhouette equals a direct O(n^2) reference.
// ---------------------------------------------------------------------------

/// Textbook silhouette computed straight from the definition.
fn silhouette_reference(distances: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let own = labels[i];
            let own_size = labels.iter().filter(|&&l| l == own).count();
            if own_size == 1 {
                return 0.0;
            }
            let a: f64 = (0..n)
                .filter(|&j| j != i && labels[j] == own)
                .map(|j| distances[i][j])
                .sum::<f64>()
                / (own_size - 1) as f64;
            let mut b = f64::INFINITY;
            let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
            for c in clusters {
                if c == own {
                    continue;
                }
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                let mean =
                    members.iter().map(|&j| distances[i][j]).sum::<f64>() / members.len() as f64;
                b = b.min(mean);
            }
            if a == 0.0 && b == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

#[test]
fn criterion_6_silhouette_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(6..30);
        let k = rng.gen_range(2..=4.min(n));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        // At least one member in each of two clusters.
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        let distances = euclidean_distance_matrix(&rows);
        let rep = silhouette(&distances, &labels, DistanceKind::EuclideanOnLatent).unwrap();
        let reference = silhouette_reference(&distances, &labels);
        let ref_mean: f64 = reference.iter().sum::<f64>() / n as f64;
        ok &= (rep.mean - ref_mean).abs() < 1e-12;
        ok &= rep
            .widths
            .iter()
            .zip(&reference)
            .all(|(a, b)| (a - b).abs() < 1e-12);
    }
    // Hand example: A = {0, 1}, B = {10, 11} on the line.
    let rows = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
    let distances = euclidean_distance_matrix(&rows);
    let rep = silhouette(&distances, &[0, 0, 1, 1], DistanceKind::EuclideanOnLatent).unwrap();
    ok &= (rep.mean - 0.8998).abs() < 1e-4;
    report(6, ok);
}

// ---------------------------------------------------------------------------
// Criterion 7: preprocessing invariants on randomized cohorts.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_preprocessing_invariants() {
    let mut ok = true;
    for seed in 0..5u64 {
        let cohort = generate(&default_templates(), 10, 0.35, seed).unwrap();
        let ds = cohort.to_dataset();

        // Imputation idempotence and provenance preservation.
        let (once, _) = impute(&ds).unwrap();
        let (twice, _) = impute(&once).unwrap();
        for (a, b) in once.encounters.iter().zip(&twice.encounters) {
            ok &= a.values == b.values;
            ok &= a.observed_mask == b.observed_mask;
        }
        for (raw, imp) in ds.encounters.iter().zip(&once.encounters) {
            ok &= raw.observed_mask == imp.observed_mask;
        }

        // Post-standardization pooled moments per feature, over the cells
        // standardization actually pools (padding excluded).
        let (pre, _, _) = preprocess_pipeline(&ds, seed).unwrap();
        for f in 0..pre.features.len() {
            let mut values = Vec::new();
            for e in &pre.encounters {
                for t in e.padding_steps..e.values.n_timesteps() {
                    values.push(e.values.get(f, t));
                }
            }
            let n = values.len() as f64;
            let mean: f64 = values.iter().sum::<f64>() / n;
            let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            ok &= mean.abs() < 1e-9;
            ok &= (var - 1.0).abs() < 1e-9;
        }
    }

    // FiO2 entirely missing for the whole cohort falls back to room air.
    let obs = "encounter_id,patient_id,hour_offset,feature,value\n\
               E1,P1,0,PaO2,90\nE1,P1,-1,PaO2,85\nE1,P1,0,PaCO2,40\n\
               E1,P1,0,SpO2,97\nE1,P1,0,HR,80\nE1,P1,0,MAP,75\n";
    let ds = trajcluster_core::cohort::ingest_long_str(obs, &FeatureSpec::canonical_six()).unwrap();
    let (imputed, _) = impute(&ds).unwrap();
    let fio2 = 2;
    for e in &imputed.encounters {
        for t in 0..e.values.n_timesteps() {
            ok &= e.values.get(fio2, t) == 0.21;
        }
    }
    report(7, ok);
}

// ---------------------------------------------------------------------------
// Criterion 8: byte-identical outputs across reruns of the binary.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_run_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config_path = tmp.path().join("config.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{
                "synth": {{"n_per": 12, "missing_rate": 0.3}},
                "method": "both",
                "candidate_ks": [3, 4],
                "seed": 17,
                "crli": {{"latent_dim": 16, "max_epochs": 100, "patience": 20}},
                "kmeans": {{"n_init": 2, "barycenter_max_iter": 5}},
                "out_dir": "{}"
            }}"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let run = || {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_trajcluster"))
            .args(["run", "--config"])
            .arg(&config_path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(out_dir.join("assignments.csv")).unwrap(),
            std::fs::read(out_dir.join("silhouette.json")).unwrap(),
        )
    };
    let (assignments_a, silhouette_a) = run();
    let (assignments_b, silhouette_b) = run();
    report(8, assignments_a == assignments_b && silhouette_a == silhouette_b);
}

// ---------------------------------------------------------------------------
// Criterion 9: Charlson hierarchy, empty codes, and age adjustment.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_charlson() {
    let weights = CharlsonWeights::bundled();
    let mut ok = true;

    // Mild (K70.3, weight 2) + moderate/severe (K72.1, weight 4) liver
    // disease: the hierarchy keeps only the severe component.
    let profile = ComorbidityProfile {
        icd10_codes: ["K70.3", "K72.1"].iter().map(|s| s.to_string()).collect(),
        age_years: 45.0,
    };
    let (cci, _, flags) = charlson(&profile, &weights);
    ok &= cci == 4;
    ok &= flags["mild_liver_disease"] && flags["moderate_severe_liver_disease"];

    // No codes: CCI 0 regardless of age (below 50).
    let empty = ComorbidityProfile {
        icd10_codes: Default::default(),
        age_years: 30.0,
    };
    let (cci, acci, _) = charlson(&empty, &weights);
    ok &= cci == 0 && acci == 0;

    // CCI 3 (CHF weight 2 + COPD weight 1) at age 67: +2 age points -> 5.
    let aged = ComorbidityProfile {
        icd10_codes: ["I50.9", "J44.9"].iter().map(|s| s.to_string()).collect(),
        age_years: 67.0,
    };
    let (cci, acci, _) = charlson(&aged, &weights);
    ok &= cci == 3 && acci == 5;
    report(9, ok);
}

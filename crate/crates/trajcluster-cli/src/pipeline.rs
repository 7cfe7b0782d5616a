//! Subcommand implementations: synthetic-cohort generation, the full
//! ingest → preprocess → cluster → select → characterize run, and evaluation
//! against ground-truth labels. Every failure is tagged with the stage it
//! occurred in, and files written by an aborted run are removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use trajcluster_core::cluster_eval::{
    adjusted_rand_index, euclidean_distance_matrix, select_k, silhouette, DistanceKind,
    SilhouetteReport,
};
use trajcluster_core::cohort::{
    apply_range_table, ingest_long_csv, CohortDataset, FeatureSpec, SurvivalRecord,
};
use trajcluster_core::crli;
use trajcluster_core::dtw::pairwise_dtw;
use trajcluster_core::kmeans_dtw::{fit_kmeans_dtw, ClusterAssignment};
use trajcluster_core::outcome_stats::{
    charlson, charlson_component_rates, km_curve, logrank_test, trajectory_bands,
    two_proportion_ztest, CharlsonWeights, KmCurve,
};
use trajcluster_core::preprocess::preprocess_pipeline;
use trajcluster_core::synth::{default_templates, generate};

use crate::config::{Method, PipelineConfig};
use crate::pca::pca_2d;
use crate::svg::{cluster_color, Plot};

/// Records every file written so an aborted run can clean up after itself.
struct OutputTracker {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputTracker {
    fn new(dir: &Path) -> Result<OutputTracker> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(OutputTracker {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn cleanup(&self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn stage<T, E: Into<anyhow::Error>>(name: &str, result: Result<T, E>) -> Result<T> {
    result.map_err(|e| anyhow!("stage {name}: {:#}", e.into()))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    let settings = cfg
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("stage synth: config has no `synth` section"))?;
    let cohort = stage(
        "synth",
        generate(
            &default_templates(),
            settings.n_per,
            settings.missing_rate,
            cfg.seed,
        ),
    )?;
    stage("synth", cohort.write_to_dir(out_dir))?;
    println!(
        "wrote synthetic cohort to {}: {} encounters, {} observations, 4 files",
        out_dir.display(),
        cohort.n_encounters(),
        cohort.n_observations()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Everything one clustering method produced across candidate k.
struct MethodResults {
    method: Method,
    reports: BTreeMap<usize, SilhouetteReport>,
    assignments: BTreeMap<usize, ClusterAssignment>,
    /// CRLI only: the clustering latent per candidate k.
    latents: BTreeMap<usize, crli::LatentMatrix>,
    selected_k: usize,
}

pub struct RunSummary {
    pub selected: BTreeMap<String, usize>,
    pub primary_method: Method,
    pub primary_k: usize,
    pub logrank_p: f64,
}

pub fn cmd_run(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut tracker = OutputTracker::new(out_dir)?;
    match run_inner(cfg, &mut tracker) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            tracker.cleanup();
            Err(e)
        }
    }
}

fn load_dataset(cfg: &PipelineConfig) -> Result<CohortDataset> {
    let mut features = FeatureSpec::canonical_six();
    if let Some(path) = &cfg.range_table {
        apply_range_table(&mut features, path)?;
    }
    let ds = match (&cfg.input, &cfg.synth) {
        (Some(paths), None) => ingest_long_csv(&paths.observations, &features)?
            .attach_outcomes(&paths.outcomes)?
            .attach_diagnoses(&paths.diagnoses)?,
        (None, Some(settings)) => {
            let cohort = generate(
                &default_templates(),
                settings.n_per,
                settings.missing_rate,
                cfg.seed,
            )?;
            let mut ds = cohort.to_dataset();
            ds.features = features;
            ds
        }
        _ => bail!("config must set exactly one of `input` and `synth`"),
    };
    Ok(ds)
}

fn cluster_method(
    method: Method,
    cfg: &PipelineConfig,
    ds: &CohortDataset,
    dtw_matrix: &mut Option<Vec<Vec<f64>>>,
) -> Result<MethodResults> {
    let mut reports = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    let mut latents = BTreeMap::new();
    for &k in &cfg.candidate_ks {
        match method {
            Method::KmeansDtw => {
                if dtw_matrix.is_none() {
                    let series: Vec<_> =
                        ds.encounters.iter().map(|e| e.values.clone()).collect();
                    *dtw_matrix = Some(pairwise_dtw(&series)?);
                }
                let assignment = fit_kmeans_dtw(ds, &cfg.kmeans.build(k, cfg.seed))?;
                let labels = assignment.labels_in_order(ds);
                let report = silhouette(
                    dtw_matrix.as_ref().unwrap(),
                    &labels,
                    DistanceKind::DtwOnSeries,
                )?;
                reports.insert(k, report);
                assignments.insert(k, assignment);
            }
            Method::Crli => {
                let result = crli::train(ds, &cfg.crli.build(k, cfg.seed))?;
                let labels = result.assignment.labels_in_order(ds);
                let distances = euclidean_distance_matrix(&result.latent);
                let report =
                    silhouette(&distances, &labels, DistanceKind::EuclideanOnLatent)?;
                reports.insert(k, report);
                assignments.insert(k, result.assignment);
                latents.insert(k, result.latent);
            }
            Method::Both => unreachable!("expand() never yields Both"),
        }
    }
    let selected_k = select_k(&reports)?;
    Ok(MethodResults {
        method,
        reports,
        assignments,
        latents,
        selected_k,
    })
}

fn run_inner(cfg: &PipelineConfig, tracker: &mut OutputTracker) -> Result<RunSummary> {
    let ds = stage("ingest", load_dataset(cfg))?;
    let (pre, _report, _std_params) = stage("preprocess", preprocess_pipeline(&ds, cfg.seed))?;
    // Uniform timestep counts only hold after length normalization.
    stage("preprocess", pre.validate())?;

    let mut dtw_matrix: Option<Vec<Vec<f64>>> = None;
    let mut results: Vec<MethodResults> = Vec::new();
    for method in cfg.method.expand() {
        results.push(stage(
            "cluster",
            cluster_method(method, cfg, &pre, &mut dtw_matrix),
        )?);
    }

    // Model selection table + the clustering that drives characterization.
    // With method = both, the representation-learning clustering is primary.
    let mut methods_json = serde_json::Map::new();
    for r in &results {
        let mut means = serde_json::Map::new();
        for (k, report) in &r.reports {
            means.insert(k.to_string(), serde_json::json!(report.mean));
        }
        methods_json.insert(
            r.method.key().to_string(),
            serde_json::json!({"mean_silhouette": means, "selected_k": r.selected_k}),
        );
    }
    let primary = results
        .iter()
        .find(|r| r.method == Method::Crli)
        .unwrap_or(&results[0]);
    let silhouette_json = serde_json::json!({
        "candidate_ks": cfg.candidate_ks,
        "methods": methods_json,
        "primary_method": primary.method.key(),
        "selected_k": primary.selected_k,
    });
    stage(
        "select",
        tracker.write(
            "silhouette.json",
            &format!("{}\n", serde_json::to_string_pretty(&silhouette_json)?),
        ),
    )?;

    let assignment = &primary.assignments[&primary.selected_k];
    let summary = characterize(cfg, &pre, primary, assignment, tracker)
        .map_err(|e| anyhow!("stage characterize: {e:#}"))?;

    // Manifest last: it lists every output of the completed run.
    let config_hash = {
        let canonical = serde_json::to_string(cfg)?;
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    };
    let outputs: Vec<String> = tracker
        .written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let manifest = serde_json::json!({
        "package_version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_sha256": config_hash,
        "method": cfg.method.key(),
        "candidate_ks": cfg.candidate_ks,
        "n_encounters": pre.encounters.len(),
        "primary_method": primary.method.key(),
        "selected_k": primary.selected_k,
        "logrank_p": summary.logrank_p,
        "outputs": outputs,
    });
    stage(
        "manifest",
        tracker.write(
            "run_manifest.json",
            &format!("{}\n", serde_json::to_string_pretty(&manifest)?),
        ),
    )?;

    let selected = results
        .iter()
        .map(|r| (r.method.key().to_string(), r.selected_k))
        .collect();
    Ok(RunSummary {
        selected,
        primary_method: primary.method,
        primary_k: primary.selected_k,
        logrank_p: summary.logrank_p,
    })
}

struct CharacterizeSummary {
    logrank_p: f64,
}

fn survival_groups(
    ds: &CohortDataset,
    labels: &BTreeMap<String, usize>,
    k: usize,
) -> Result<Vec<Vec<SurvivalRecord>>> {
    if ds.outcomes.is_empty() {
        bail!("no survival outcomes attached to the cohort");
    }
    let mut groups: Vec<Vec<SurvivalRecord>> = vec![Vec::new(); k];
    for (id, record) in &ds.outcomes {
        let &label = labels
            .get(id)
            .ok_or_else(|| anyhow!("outcome for unknown encounter `{id}`"))?;
        groups[label].push(record.clone());
    }
    Ok(groups)
}

fn characterize(
    _cfg: &PipelineConfig,
    pre: &CohortDataset,
    primary: &MethodResults,
    assignment: &ClusterAssignment,
    tracker: &mut OutputTracker,
) -> Result<CharacterizeSummary> {
    let order = pre.encounter_ids();
    let k = assignment.k;
    let labels = &assignment.labels;

    let mut assignments_csv = Vec::new();
    assignment.write_csv(Some(&order), &mut assignments_csv)?;
    tracker.write("assignments.csv", std::str::from_utf8(&assignments_csv)?)?;

    // --- Survival ---
    let groups = survival_groups(pre, labels, k)?;
    let curves: Vec<KmCurve> = groups
        .iter()
        .enumerate()
        .map(|(c, records)| km_curve(records, &format!("cluster_{c}")))
        .collect::<Result<_, _>>()?;
    let (_, _, logrank_p) = logrank_test(&groups)?;

    let mut km_csv = String::from("cluster,time_days,survival,at_risk,deaths\n");
    let mut km_plot = Plot::new(
        "Kaplan-Meier survival by cluster",
        "days since ICU admission",
        "survival probability",
        (0.0, 28.0),
        (0.0, 1.0),
    );
    for (c, curve) in curves.iter().enumerate() {
        writeln!(km_csv, "{c},0,1,{},0", groups[c].len()).unwrap();
        let mut points = vec![(0.0, 1.0)];
        for i in 0..curve.event_times.len() {
            writeln!(
                km_csv,
                "{c},{},{},{},{}",
                curve.event_times[i], curve.survival[i], curve.at_risk[i], curve.deaths[i]
            )
            .unwrap();
            points.push((curve.event_times[i], curve.survival[i]));
        }
        points.push((28.0, curve.survival.last().copied().unwrap_or(1.0)));
        km_plot.step_line(&points, cluster_color(c));
        km_plot.legend_entry(&format!("cluster {c} (n={})", groups[c].len()), cluster_color(c));
    }
    tracker.write("km_curves.csv", &km_csv)?;
    tracker.write("km.svg", &km_plot.render())?;

    // --- Trajectory bands per feature ---
    for (f, spec) in pre.features.iter().enumerate() {
        let bands = trajectory_bands(pre, labels, f)?;
        let mut csv = String::from("cluster,timestep,mean,half_width,n,band_defined\n");
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for band in &bands {
            for t in 0..band.mean.len() {
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    band.cluster, t, band.mean[t], band.half_width[t], band.n[t],
                    band.band_defined
                )
                .unwrap();
                lo = lo.min(band.mean[t] - band.half_width[t]);
                hi = hi.max(band.mean[t] + band.half_width[t]);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = -1.0;
            hi = 1.0;
        }
        let mut plot = Plot::new(
            &format!("{} trajectories (mean with 83.4% band)", spec.name),
            "hours before end of window",
            &format!("{} (z-score)", spec.name),
            (0.0, 23.0),
            (lo, hi),
        );
        for band in &bands {
            let ts = |v: &[f64]| -> Vec<(f64, f64)> {
                v.iter().enumerate().map(|(t, &y)| (t as f64, y)).collect()
            };
            plot.polyline(&ts(&band.mean), cluster_color(band.cluster), false);
            if band.band_defined {
                let upper: Vec<f64> = band
                    .mean
                    .iter()
                    .zip(&band.half_width)
                    .map(|(m, h)| m + h)
                    .collect();
                let lower: Vec<f64> = band
                    .mean
                    .iter()
                    .zip(&band.half_width)
                    .map(|(m, h)| m - h)
                    .collect();
                plot.polyline(&ts(&upper), cluster_color(band.cluster), true);
                plot.polyline(&ts(&lower), cluster_color(band.cluster), true);
            }
            plot.legend_entry(&format!("cluster {}", band.cluster), cluster_color(band.cluster));
        }
        tracker.write(&format!("trajectories_{}.csv", spec.name), &csv)?;
        tracker.write(&format!("trajectories_{}.svg", spec.name), &plot.render())?;
    }

    // --- Demographics ---
    let total_n: usize = groups.iter().map(|g| g.len()).sum();
    let total_deaths: usize = groups
        .iter()
        .map(|g| g.iter().filter(|r| r.event).count())
        .sum();
    let mut ages_per_cluster: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (id, profile) in &pre.diagnoses {
        if let Some(&label) = labels.get(id) {
            ages_per_cluster[label].push(profile.age_years);
        }
    }
    let mut demo_csv = String::from(
        "cluster,n,deaths,mortality,mean_age,sd_age,mortality_z_vs_rest,mortality_p_vs_rest\n",
    );
    for c in 0..k {
        let n = groups[c].len();
        let deaths = groups[c].iter().filter(|r| r.event).count();
        let mortality = if n > 0 { deaths as f64 / n as f64 } else { f64::NAN };
        let (mean_age, sd_age) = mean_sd(&ages_per_cluster[c]);
        let (z, p) = if n > 0 && total_n > n {
            two_proportion_ztest(deaths, n, total_deaths - deaths, total_n - n)?
        } else {
            (f64::NAN, f64::NAN)
        };
        writeln!(demo_csv, "{c},{n},{deaths},{mortality},{mean_age},{sd_age},{z},{p}").unwrap();
    }
    tracker.write("demographics.csv", &demo_csv)?;

    // --- Comorbidity ---
    let weights = CharlsonWeights::bundled();
    let rates = charlson_component_rates(&pre.diagnoses, labels, &weights)?;
    let component_names: Vec<String> = weights.components.iter().map(|c| c.name.clone()).collect();
    let mut com_csv = String::from("cluster,n,mean_cci,sd_cci,mean_acci,sd_acci");
    for name in &component_names {
        com_csv.push(',');
        com_csv.push_str(name);
    }
    com_csv.push('\n');
    let mut scores_per_cluster: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    for (id, profile) in &pre.diagnoses {
        if let Some(&label) = labels.get(id) {
            let (cci, acci, _) = charlson(profile, &weights);
            scores_per_cluster[label].0.push(cci as f64);
            scores_per_cluster[label].1.push(acci as f64);
        }
    }
    for c in 0..k {
        let (mean_cci, sd_cci) = mean_sd(&scores_per_cluster[c].0);
        let (mean_acci, sd_acci) = mean_sd(&scores_per_cluster[c].1);
        write!(
            com_csv,
            "{c},{},{mean_cci},{sd_cci},{mean_acci},{sd_acci}",
            scores_per_cluster[c].0.len()
        )
        .unwrap();
        for name in &component_names {
            let rate = rates
                .get(&c)
                .and_then(|r| r.get(name))
                .copied()
                .unwrap_or(f64::NAN);
            write!(com_csv, ",{rate}").unwrap();
        }
        com_csv.push('\n');
    }
    tracker.write("comorbidity.csv", &com_csv)?;

    // --- Latent projection (representation-learning runs only) ---
    if let Some(latent) = primary.latents.get(&primary.selected_k) {
        let proj = pca_2d(latent);
        let mut csv = String::from("encounter_id,pc1,pc2,cluster\n");
        let mut per_cluster: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
        let (mut xlo, mut xhi, mut ylo, mut yhi) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (e, &(x, y)) in pre.encounters.iter().zip(&proj) {
            let label = labels[&e.encounter_id];
            writeln!(csv, "{},{x},{y},{label}", e.encounter_id).unwrap();
            per_cluster[label].push((x, y));
            xlo = xlo.min(x);
            xhi = xhi.max(x);
            ylo = ylo.min(y);
            yhi = yhi.max(y);
        }
        let mut plot = Plot::new(
            "Clustering latent, 2-D principal-component projection",
            "PC1",
            "PC2",
            (xlo, xhi),
            (ylo, yhi),
        );
        for (c, points) in per_cluster.iter().enumerate() {
            plot.scatter(points, cluster_color(c));
            plot.legend_entry(&format!("cluster {c}"), cluster_color(c));
        }
        tracker.write("latent_projection.csv", &csv)?;
        tracker.write("latent_projection.svg", &plot.render())?;
    }

    Ok(CharacterizeSummary { logrank_p })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Parse `encounter_id,label[,...]` CSVs (assignments and ground truth).
fn read_label_csv(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| anyhow!("{}:{}: missing encounter id", path.display(), i + 1))?;
        let label: usize = parts
            .next()
            .ok_or_else(|| anyhow!("{}:{}: missing label", path.display(), i + 1))?
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad label", path.display(), i + 1))?;
        out.insert(id.trim().to_string(), label);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &PipelineConfig, out_dir: &Path) -> Result<f64> {
    let assignments_path = out_dir.join("assignments.csv");
    let truth_path = cfg
        .truth_labels
        .clone()
        .unwrap_or_else(|| out_dir.join("true_labels.csv"));
    let assignments = stage("eval", read_label_csv(&assignments_path))?;
    let truth = stage("eval", read_label_csv(&truth_path))?;
    let ids_a: Vec<&String> = assignments.keys().collect();
    let ids_t: Vec<&String> = truth.keys().collect();
    if ids_a != ids_t {
        return Err(anyhow!(
            "stage eval: assignment and truth files cover different encounters \
             ({} vs {} ids)",
            ids_a.len(),
            ids_t.len()
        ));
    }
    let a: Vec<usize> = assignments.values().copied().collect();
    let t: Vec<usize> = truth.values().copied().collect();
    let ari = stage("eval", adjusted_rand_index(&a, &t))?;

    // Log-rank across the assigned clusters, over the same cohort the run saw.
    let ds = stage("eval", load_dataset(cfg))?;
    let k = assignments.values().copied().max().unwrap_or(0) + 1;
    let groups = survival_groups(&ds, &assignments, k).map_err(|e| anyhow!("stage eval: {e:#}"))?;
    let nonempty: Vec<Vec<SurvivalRecord>> =
        groups.into_iter().filter(|g| !g.is_empty()).collect();
    let (stat, df, p) = stage("eval", logrank_test(&nonempty))?;

    let eval_json = serde_json::json!({
        "n": a.len(),
        "ari": ari,
        "logrank_stat": stat,
        "logrank_df": df,
        "logrank_p": p,
    });
    let path = out_dir.join("eval.json");
    std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&eval_json)?))
        .with_context(|| format!("writing {}", path.display()))?;
    println!("ari {ari:.4}, log-rank p {p:.3e} -> {}", path.display());
    Ok(ari)
}

//! Pipeline configuration: one JSON file drives synth, run, and eval.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trajcluster_core::crli::CrliConfig;
use trajcluster_core::kmeans_dtw::KMeansConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Crli,
    KmeansDtw,
    Both,
}

impl Method {
    /// Concrete methods to run, in a fixed order.
    pub fn expand(self) -> Vec<Method> {
        match self {
            Method::Both => vec![Method::Crli, Method::KmeansDtw],
            m => vec![m],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Crli => "crli",
            Method::KmeansDtw => "kmeans_dtw",
            Method::Both => "both",
        }
    }
}

/// Input CSV locations for a real (non-synthetic) cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPaths {
    pub observations: PathBuf,
    pub outcomes: PathBuf,
    pub diagnoses: PathBuf,
}

/// Synthetic-cohort settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub n_per: usize,
    #[serde(default = "default_missing_rate")]
    pub missing_rate: f64,
}

fn default_missing_rate() -> f64 {
    0.3
}

/// Optional overrides for the CRLI trainer; unset fields keep the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrliOverrides {
    pub latent_dim: Option<usize>,
    pub generator_layers: Option<usize>,
    pub lambda_kmeans: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,
    pub f_update_interval: Option<usize>,
}

impl CrliOverrides {
    pub fn build(&self, k: usize, seed: u64) -> CrliConfig {
        let mut cfg = CrliConfig::new(k, seed);
        if let Some(v) = self.latent_dim {
            cfg.latent_dim = v;
        }
        if let Some(v) = self.generator_layers {
            cfg.generator_layers = v;
        }
        if let Some(v) = self.lambda_kmeans {
            cfg.lambda_kmeans = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.f_update_interval {
            cfg.f_update_interval = v;
        }
        cfg
    }
}

/// Optional overrides for K-means under DTW.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansOverrides {
    pub n_init: Option<usize>,
    pub max_iter: Option<usize>,
    pub barycenter_max_iter: Option<usize>,
    pub tol: Option<f64>,
}

impl KMeansOverrides {
    pub fn build(&self, k: usize, seed: u64) -> KMeansConfig {
        let mut cfg = KMeansConfig::new(k, seed);
        if let Some(v) = self.n_init {
            cfg.n_init = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.barycenter_max_iter {
            cfg.barycenter_max_iter = v;
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSettings>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_candidate_ks")]
    pub candidate_ks: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Optional outlier-range table overriding the built-in physiologic
    /// ranges (`feature,min,max` lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_table: Option<PathBuf>,
    #[serde(default)]
    pub crli: CrliOverrides,
    #[serde(default)]
    pub kmeans: KMeansOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Ground-truth labels for `eval` (`encounter_id,label`); defaults to
    /// `true_labels.csv` inside the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_labels: Option<PathBuf>,
}

fn default_method() -> Method {
    Method::Both
}

fn default_candidate_ks() -> Vec<usize> {
    vec![3, 4, 5]
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input, &self.synth) {
            (Some(_), Some(_)) => bail!("config must set exactly one of `input` and `synth`, not both"),
            (None, None) => bail!("config must set one of `input` (CSV paths) or `synth` (generator settings)"),
            _ => {}
        }
        if self.candidate_ks.is_empty() {
            bail!("candidate_ks must be nonempty");
        }
        if self.candidate_ks.iter().any(|&k| k < 2) {
            bail!("every candidate k must be at least 2");
        }
        Ok(())
    }

    /// Output directory precedence: CLI flag, then TRAJCLUSTER_OUT, then the
    /// config's out_dir, then ./trajcluster_out.
    pub fn resolve_out_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Ok(env) = std::env::var("TRAJCLUSTER_OUT") {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("trajcluster_out"))
    }
}

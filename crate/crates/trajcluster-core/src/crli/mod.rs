//! Clustering representation learning on incomplete time series: a
//! bidirectional recurrent generator with per-cell imputation adversary, a
//! recurrent autoencoder head, and a spectral soft K-means regularizer on the
//! clustering latent. Trained full-batch by plain gradient descent with early
//! stopping; gradients are hand-derived (backward module) and verified against
//! both a scalar reverse-mode tape and central finite differences.

pub mod backward;
pub mod model;
pub mod real;
pub mod tape;
mod train;

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CohortDataset;
use crate::linalg::sym_eigen;
use self::model::{CrliDims, CrliParams, GruParams, LossTerms};
pub use self::train::{train, CrliTrainResult};

/// Clustering latent: one row per encounter, in dataset order.
pub type LatentMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrliConfig {
    pub latent_dim: usize,
    pub generator_layers: usize,
    pub discriminator_layers: usize,
    pub k: usize,
    pub lambda_kmeans: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub f_update_interval: usize,
    /// Per-direction generator hidden size; defaults to latent_dim / 2 so the
    /// concatenated projection is square.
    pub gen_hidden: Option<usize>,
    /// Per-layer discriminator hidden size; defaults to latent_dim / 4.
    pub disc_hidden: Option<usize>,
}

impl CrliConfig {
    pub fn new(k: usize, seed: u64) -> CrliConfig {
        CrliConfig {
            latent_dim: 128,
            generator_layers: 2,
            discriminator_layers: 5,
            k,
            lambda_kmeans: 1e-3,
            max_epochs: 100_000,
            patience: 100,
            seed,
            learning_rate: 1e-3,
            f_update_interval: 10,
            gen_hidden: None,
            disc_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<(), CrliError> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("generator_layers", self.generator_layers),
            ("discriminator_layers", self.discriminator_layers),
            ("k", self.k),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("f_update_interval", self.f_update_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CrliError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_kmeans > 0.0) || !(self.learning_rate > 0.0) {
            return Err(CrliError::InvalidConfig(
                "lambda_kmeans and learning_rate must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CrliError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("dataset has {n} encounters but k = {k} clusters were requested")]
    TooFewEncounters { n: usize, k: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o error: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(#[from] serde_json::Error),
}

/// Per-epoch loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pre: f64,
    pub l_rec: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_kmeans: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    fn from_terms(t: &LossTerms<f64>) -> LossBreakdown {
        LossBreakdown {
            l_pre: t.l_pre,
            l_rec: t.l_rec,
            l_adv_g: t.l_adv_g,
            l_adv_d: t.l_adv_d,
            l_kmeans: t.l_kmeans,
            total_g: t.total_g,
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.l_pre,
            self.l_rec,
            self.l_adv_g,
            self.l_adv_d,
            self.l_kmeans,
            self.total_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Concrete layer sizes for a config and dataset.
pub fn resolve_dims(cfg: &CrliConfig, ds: &CohortDataset) -> Result<CrliDims, CrliError> {
    cfg.validate()?;
    let first = ds
        .encounters
        .first()
        .ok_or_else(|| CrliError::InvalidConfig("empty dataset".to_string()))?;
    let d = first.values.n_features();
    let t = first.values.n_timesteps();
    for e in &ds.encounters {
        if e.values.n_features() != d || e.values.n_timesteps() != t {
            return Err(CrliError::InvalidConfig(format!(
                "encounter {} has shape [{} x {}], expected [{d} x {t}]",
                e.encounter_id,
                e.values.n_features(),
                e.values.n_timesteps()
            )));
        }
    }
    Ok(CrliDims {
        d,
        t,
        latent: cfg.latent_dim,
        gen_hidden: cfg.gen_hidden.unwrap_or((cfg.latent_dim / 2).max(1)),
        gen_layers: cfg.generator_layers,
        disc_hidden: cfg.disc_hidden.unwrap_or((cfg.latent_dim / 4).max(1)),
        disc_layers: cfg.discriminator_layers,
    })
}

/// Standard GRU step: z = sigma(Wz x + Uz h + bz), r likewise,
/// c = tanh(Wc x + Uc (r .* h) + bc), h' = (1-z) .* h + z .* c.
pub fn gru_cell_forward(params: &GruParams<f64>, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
    model::gru_step(params, x, h_prev).h
}

/// Clustering latent for every encounter.
pub fn encode(ds: &CohortDataset, params: &CrliParams<f64>) -> LatentMatrix {
    model::forward_cohort(params, ds)
        .into_iter()
        .map(|c| c.h_enc)
        .collect()
}

/// Next-step predictions per encounter, [t x d] each (the l_pre targets).
pub fn generator_predict(ds: &CohortDataset, params: &CrliParams<f64>) -> Vec<Vec<Vec<f64>>> {
    model::forward_cohort(params, ds)
        .into_iter()
        .map(|c| c.preds)
        .collect()
}

/// Decoder rollout from latent rows: `t_len` zero-input steps each, giving
/// [t x d] reconstructions per row.
pub fn decode(h: &LatentMatrix, params: &CrliParams<f64>, t_len: usize) -> Vec<Vec<Vec<f64>>> {
    h.iter()
        .map(|row| {
            let h0: Vec<f64> = model::affine(&params.dec_init, row)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let mut state = h0;
            let mut out = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                state = model::gru_step(&params.dec_gru, &[], &state).h;
                out.push(model::affine(&params.out_head, &state));
            }
            out
        })
        .collect()
}

/// Per-cell realness logits for a batch of [t x d] series.
pub fn discriminate(series: &[Vec<Vec<f64>>], params: &CrliParams<f64>) -> Vec<Vec<Vec<f64>>> {
    series
        .iter()
        .map(|s| {
            let mut seq: Vec<Vec<f64>> = s.clone();
            for gru in &params.disc_layers {
                let mut h = vec![0.0; gru.hidden_dim];
                seq = seq
                    .iter()
                    .map(|x| {
                        h = model::gru_step(gru, x, &h).h;
                        h.clone()
                    })
                    .collect();
            }
            seq.iter()
                .map(|h| model::affine(&params.score_head, h))
                .collect()
        })
        .collect()
}

/// All loss terms at the current parameters, with F held fixed.
pub fn compute_losses(
    ds: &CohortDataset,
    params: &CrliParams<f64>,
    f: &[Vec<f64>],
    lambda: f64,
) -> LossBreakdown {
    let caches = model::forward_cohort::<f64>(params, ds);
    LossBreakdown::from_terms(&model::compute_loss_terms(params, &caches, ds, f, lambda))
}

/// Top-k left singular vectors of H as an [n x k] orthonormal matrix,
/// computed via the eigendecomposition of the [latent x latent] Gram matrix.
/// Rank deficiency (and k up to n) is handled by padding with an orthonormal
/// complement built from standard basis vectors.
pub fn update_f(h: &LatentMatrix, k: usize) -> Vec<Vec<f64>> {
    let n = h.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    let latent = h[0].len();
    let mut gram = vec![0.0; latent * latent];
    for row in h {
        for a in 0..latent {
            for b in 0..latent {
                gram[a * latent + b] += row[a] * row[b];
            }
        }
    }
    let (evals, evecs) = sym_eigen(&gram, latent);
    let scale = evals.first().copied().unwrap_or(0.0).abs().max(1.0);
    // Columns of F, each length n.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k.min(latent) {
        if evals[j] <= 1e-12 * scale {
            break;
        }
        let sigma = evals[j].sqrt();
        let mut u = vec![0.0; n];
        for (i, row) in h.iter().enumerate() {
            let mut s = 0.0;
            for a in 0..latent {
                s += row[a] * evecs[a * latent + j];
            }
            u[i] = s / sigma;
        }
        if push_orthonormalized(&mut cols, u) {
            continue;
        }
        break;
    }
    let mut basis = 0;
    while cols.len() < k {
        assert!(basis < n, "unable to complete orthonormal basis");
        let mut u = vec![0.0; n];
        u[basis] = 1.0;
        basis += 1;
        push_orthonormalized(&mut cols, u);
    }
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// Gram-Schmidt a candidate against the accepted columns; reject candidates
/// that are numerically dependent. Returns whether the column was accepted.
fn push_orthonormalized(cols: &mut Vec<Vec<f64>>, mut u: Vec<f64>) -> bool {
    // Two passes for numerical stability.
    for _ in 0..2 {
        for prev in cols.iter() {
            let dot: f64 = u.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (ui, pi) in u.iter_mut().zip(prev) {
                *ui -= dot * pi;
            }
        }
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return false;
    }
    for v in &mut u {
        *v /= norm;
    }
    cols.push(u);
    true
}

/// Maximum relative error between the hand-derived gradients of the total
/// generator objective and central finite differences, over every parameter.
pub fn gradient_check(ds: &CohortDataset, cfg: &CrliConfig) -> Result<f64, CrliError> {
    let dims = resolve_dims(cfg, ds)?;
    let mut params = CrliParams::init(&dims, cfg.seed);
    let caches = model::forward_cohort::<f64>(&params, ds);
    let h: LatentMatrix = caches.iter().map(|c| c.h_enc.clone()).collect();
    let f = update_f(&h, cfg.k);
    let (d_total, _) = backward::backward_cohort(&params, &caches, ds, &f, cfg.lambda_kmeans);
    let analytic = d_total.flatten();
    let mut flat = params.flatten();
    let step = 1e-5;
    let mut max_rel: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        params.assign_flat(&flat);
        let up = compute_losses(ds, &params, &f, cfg.lambda_kmeans).total_g;
        flat[i] = orig - step;
        params.assign_flat(&flat);
        let down = compute_losses(ds, &params, &f, cfg.lambda_kmeans).total_g;
        flat[i] = orig;
        params.assign_flat(&flat);
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Serialized training state: config, progress, and named parameter arrays.
/// Sufficient to resume encoding (and inspection) without retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: CrliConfig,
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<LossBreakdown>,
    pub params: CrliParams<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CrliError> {
        let mut file = std::fs::File::create(path)?;
        let text = serde_json::to_string(self)?;
        file.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CrliError> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The raw spectral K-means objective tr(H^T H) - tr(F^T H H^T F) on plain
/// matrices (test and oracle helper).
pub fn kmeans_loss_value(h: &LatentMatrix, f: &[Vec<f64>]) -> f64 {
    let latent = h.first().map_or(0, |r| r.len());
    let k = f.first().map_or(0, |r| r.len());
    let mut total: f64 = h.iter().flatten().map(|v| v * v).sum();
    for c in 0..k {
        for j in 0..latent {
            let mut acc = 0.0;
            for (i, row) in h.iter().enumerate() {
                acc += f[i][c] * row[j];
            }
            total -= acc * acc;
        }
    }
    total
}


#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::model::{forward_cohort, gru_step};
    use super::test_support::{tiny_config, tiny_dataset};
    use super::*;

    fn zero_gru(input_dim: usize, hidden_dim: usize) -> GruParams<f64> {
        let dims = CrliDims {
            d: input_dim.max(1),
            t: 1,
            latent: hidden_dim,
            gen_hidden: hidden_dim,
            gen_layers: 1,
            disc_hidden: 1,
            disc_layers: 1,
        };
        let mut p = CrliParams::zeros(&dims).gen_layers.remove(0).fwd;
        p.input_dim = input_dim;
        p.wz = vec![0.0; hidden_dim * input_dim];
        p.wr = vec![0.0; hidden_dim * input_dim];
        p.wc = vec![0.0; hidden_dim * input_dim];
        p
    }

    #[test]
    fn gru_zero_params_halves_state() {
        // z = sigmoid(0) = 0.5 and c = tanh(0) = 0, so h = 0.5 * h_prev.
        let p = zero_gru(3, 4);
        let h_prev = [1.0, -2.0, 0.5, 4.0];
        let h = gru_cell_forward(&p, &[9.0, -3.0, 7.0], &h_prev);
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let h0 = gru_cell_forward(&p, &[1.0, 1.0, 1.0], &[0.0; 4]);
        assert!(h0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_saturates_on_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = CrliDims {
            d: 3,
            t: 1,
            latent: 4,
            gen_hidden: 4,
            gen_layers: 1,
            disc_hidden: 1,
            disc_layers: 1,
        };
        let p = CrliParams::init(&dims, 11).gen_layers.remove(0).fwd;
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let h_prev: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = gru_cell_forward(&p, &x, &h_prev);
            assert!(h.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let ds = tiny_dataset(5, 6, 2, 3);
        let cfg = tiny_config(2, 3);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, cfg.seed);
        let h1 = encode(&ds, &params);
        let h2 = encode(&ds, &params);
        assert_eq!(h1.len(), 5);
        assert!(h1.iter().all(|row| row.len() == cfg.latent_dim));
        for (a, b) in h1.iter().flatten().zip(h2.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encode_identical_encounters_match() {
        let mut ds = tiny_dataset(2, 6, 2, 5);
        ds.encounters[1].values = ds.encounters[0].values.clone();
        ds.encounters[1].observed_mask = ds.encounters[0].observed_mask.clone();
        let cfg = tiny_config(2, 5);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, cfg.seed);
        let h = encode(&ds, &params);
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn encode_zero_params_gives_projection_bias() {
        let ds = tiny_dataset(3, 6, 2, 9);
        let cfg = tiny_config(2, 9);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::zeros(&dims);
        let h = encode(&ds, &params);
        for row in &h {
            assert_eq!(row, &params.proj.b);
        }
    }

    #[test]
    fn decode_shape_and_identity() {
        let cfg = tiny_config(2, 1);
        let ds = tiny_dataset(2, 6, 2, 1);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, 17);
        let latent = vec![vec![0.3; 5], vec![0.3; 5], vec![-0.4; 5]];
        let out = decode(&latent, &params, 6);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s.len() == 6 && s.iter().all(|r| r.len() == 2)));
        assert_eq!(out[0], out[1]); // identical latents reconstruct identically
        assert!(out.iter().flatten().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn discriminate_shape_and_determinism() {
        let cfg = tiny_config(2, 2);
        let ds = tiny_dataset(2, 6, 2, 2);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, 23);
        let series = vec![vec![vec![0.1, -0.2]; 6], vec![vec![1.0, 0.0]; 6]];
        let s1 = discriminate(&series, &params);
        let s2 = discriminate(&series, &params);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 2);
        assert!(s1.iter().all(|s| s.len() == 6 && s.iter().all(|r| r.len() == 2)));
        assert!(s1.iter().flatten().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn perfect_fit_zeroes_pre_and_rec() {
        // All-zero values with all-zero parameters: predictions, decoder
        // outputs, and targets are all exactly zero.
        let mut ds = tiny_dataset(3, 6, 2, 4);
        for e in &mut ds.encounters {
            for t in 0..6 {
                for f in 0..2 {
                    e.values.set(f, t, 0.0);
                }
            }
        }
        let cfg = tiny_config(2, 4);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::zeros(&dims);
        let h = encode(&ds, &params);
        let f = update_f(&h, cfg.k);
        let losses = compute_losses(&ds, &params, &f, cfg.lambda_kmeans);
        assert_eq!(losses.l_pre, 0.0);
        assert_eq!(losses.l_rec, 0.0);
        assert!((losses.total_g - (losses.l_adv_g + cfg.lambda_kmeans * losses.l_kmeans)).abs() < 1e-12);
    }

    fn random_h(n: usize, latent: usize, seed: u64) -> LatentMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..latent).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < k {
            let cand: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            super::push_orthonormalized(&mut cols, cand);
        }
        (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    }

    #[test]
    fn kmeans_loss_nonnegative_and_svd_optimal() {
        let h = random_h(12, 5, 31);
        let f_opt = update_f(&h, 3);
        let best = kmeans_loss_value(&h, &f_opt);
        assert!(best >= -1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let f_rand = random_orthonormal(12, 3, &mut rng);
            let v = kmeans_loss_value(&h, &f_rand);
            assert!(v >= -1e-9);
            assert!(v >= best - 1e-9, "random F beat the SVD optimum: {v} < {best}");
        }
    }

    #[test]
    fn update_f_is_orthonormal() {
        for (n, latent, k) in [(10, 4, 3), (8, 4, 8), (6, 3, 2)] {
            let h = random_h(n, latent, 100 + n as u64);
            let f = update_f(&h, k);
            for a in 0..k {
                for b in 0..k {
                    let dot: f64 = (0..n).map(|i| f[i][a] * f[i][b]).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-10, "FtF[{a}][{b}] = {dot}");
                }
            }
        }
    }

    #[test]
    fn update_f_full_basis_zeroes_kmeans_loss() {
        // k = n: F spans all of R^n, so the truncation loses nothing.
        let h = random_h(6, 4, 55);
        let f = update_f(&h, 6);
        assert!(kmeans_loss_value(&h, &f).abs() < 1e-9);
    }

    #[test]
    fn update_f_separates_planted_clusters() {
        // Two well-separated row groups: the top singular vectors are close
        // to block-constant, so F F^T entries within a group share sign
        // structure distinct from the cross-group entries.
        let mut h = Vec::new();
        for _ in 0..5 {
            h.push(vec![5.0, 5.0, 0.1]);
        }
        for _ in 0..5 {
            h.push(vec![-5.0, 5.0, -0.1]);
        }
        let f = update_f(&h, 2);
        let ip = |i: usize, j: usize| -> f64 { (0..2).map(|c| f[i][c] * f[j][c]).sum() };
        for i in 0..5 {
            for j in 0..5 {
                assert!(ip(i, j) > 0.1, "within-group affinity should be high");
                assert!(ip(i + 5, j + 5) > 0.1);
                assert!(ip(i, j + 5).abs() < 0.05, "cross-group affinity should vanish");
            }
        }
    }

    #[test]
    fn rank_deficient_h_still_orthonormal() {
        // Rank-1 H with k = 3 forces complement padding.
        let h: LatentMatrix = (0..6).map(|i| vec![(i + 1) as f64, 2.0 * (i + 1) as f64]).collect();
        let f = update_f(&h, 3);
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..6).map(|i| f[i][a] * f[i][b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_check_passes_on_tiny_config() {
        let ds = tiny_dataset(8, 6, 2, 42);
        let cfg = tiny_config(2, 42);
        let err = gradient_check(&ds, &cfg).unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn gradient_check_deterministic() {
        let ds = tiny_dataset(8, 6, 2, 42);
        let cfg = tiny_config(2, 42);
        let a = gradient_check(&ds, &cfg).unwrap();
        let b = gradient_check(&ds, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradients_finite_at_zero_point() {
        let ds = tiny_dataset(8, 6, 2, 12);
        let cfg = tiny_config(2, 12);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::zeros(&dims);
        let caches = forward_cohort::<f64>(&params, &ds);
        let h: LatentMatrix = caches.iter().map(|c| c.h_enc.clone()).collect();
        let f = update_f(&h, cfg.k);
        let (d_total, d_adv) =
            backward::backward_cohort(&params, &caches, &ds, &f, cfg.lambda_kmeans);
        assert!(d_total.all_finite());
        assert!(d_adv.all_finite());
    }

    #[test]
    fn tape_agrees_with_hand_derived_backward() {
        use super::real::Real;
        use super::tape::Tape;

        let ds = tiny_dataset(6, 5, 2, 88);
        let cfg = tiny_config(2, 88);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, cfg.seed);
        let caches = forward_cohort::<f64>(&params, &ds);
        let h: LatentMatrix = caches.iter().map(|c| c.h_enc.clone()).collect();
        let f = update_f(&h, cfg.k);
        let (d_total, d_adv_d) =
            backward::backward_cohort(&params, &caches, &ds, &f, cfg.lambda_kmeans);

        let tape = Tape::new();
        let mut leaves = Vec::new();
        let tracked = params.map(&mut |v: f64| {
            let var = tape.var(v);
            leaves.push(var.grad_index());
            var
        });
        let tcaches = forward_cohort(&tracked, &ds);
        let terms = super::model::compute_loss_terms(&tracked, &tcaches, &ds, &f, cfg.lambda_kmeans);
        let g_total = tape.gradients(terms.total_g);
        let g_adv_d = tape.gradients(terms.l_adv_d);

        // Leaves were created in the same traversal order flatten() uses.
        let bptt_total = d_total.flatten();
        let bptt_adv_d = d_adv_d.flatten();
        assert_eq!(terms.total_g.value(), {
            let plain = super::model::compute_loss_terms(&params, &caches, &ds, &f, cfg.lambda_kmeans);
            plain.total_g
        });
        // The discriminator step only uses l_adv_d gradients w.r.t. the
        // discriminator's own parameters, which occupy the tail of the
        // flatten order; the tape additionally sees the path through imputed
        // discriminator inputs into the generator, which the update ignores.
        let disc_tail: usize = params
            .disc_layers
            .iter()
            .map(|g| {
                g.wz.len()
                    + g.uz.len()
                    + g.bz.len()
                    + g.wr.len()
                    + g.ur.len()
                    + g.br.len()
                    + g.wc.len()
                    + g.uc.len()
                    + g.bc.len()
            })
            .sum::<usize>()
            + params.score_head.w.len()
            + params.score_head.b.len();
        let disc_start = bptt_total.len() - disc_tail;
        for (i, &leaf) in leaves.iter().enumerate() {
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(
                rel(g_total[leaf], bptt_total[i]) < 1e-9,
                "total_g grad {i}: tape {} vs bptt {}",
                g_total[leaf],
                bptt_total[i]
            );
            if i >= disc_start {
                assert!(
                    rel(g_adv_d[leaf], bptt_adv_d[i]) < 1e-9,
                    "l_adv_d grad {i}: tape {} vs bptt {}",
                    g_adv_d[leaf],
                    bptt_adv_d[i]
                );
            } else {
                assert_eq!(bptt_adv_d[i], 0.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = tiny_dataset(4, 6, 2, 19);
        let cfg = tiny_config(2, 19);
        let dims = resolve_dims(&cfg, &ds).unwrap();
        let params = CrliParams::init(&dims, cfg.seed);
        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch: 7,
            seed: cfg.seed,
            loss_history: vec![LossBreakdown {
                l_pre: 0.1,
                l_rec: 0.2,
                l_adv_g: 0.3,
                l_adv_d: 0.4,
                l_kmeans: 0.5,
                total_g: 0.6005,
            }],
            params,
        };
        let dir = std::env::temp_dir().join("crli_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        // Resumed parameters encode identically.
        let h1 = encode(&ds, &ckpt.params);
        let h2 = encode(&ds, &loaded.params);
        assert_eq!(h1, h2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = CrliConfig::new(0, 1);
        assert!(cfg.validate().is_err());
        cfg.k = 3;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 1e-3;
        assert!(cfg.validate().is_ok());
    }
}

//! Full-batch alternating training: a discriminator step on the adversarial
//! classification loss and a generator/decoder step on the total objective,
//! both from the same forward pass, with periodic refresh of the spectral
//! K-means target F and early stopping on the generator objective.

use std::collections::BTreeMap;

use super::backward::backward_cohort;
use super::model::{compute_loss_terms, forward_cohort, CrliParams, GruParams, Linear};
use super::{resolve_dims, update_f, CrliConfig, CrliError, LatentMatrix, LossBreakdown};
use crate::cohort::CohortDataset;
use crate::grid::Grid;
use crate::kmeans_dtw::{ClusterAssignment, ClusterMethod};
use crate::linalg::kmeans_euclidean;

/// Minimum decrease of total_g that counts as improvement.
const IMPROVEMENT_TOL: f64 = 1e-6;
/// Restarts and iteration cap for the final Euclidean K-means on H.
const FINAL_KMEANS_RESTARTS: usize = 10;
const FINAL_KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone)]
pub struct CrliTrainResult {
    pub params: CrliParams<f64>,
    pub latent: LatentMatrix,
    pub assignment: ClusterAssignment,
    pub loss_history: Vec<LossBreakdown>,
}

fn axpy_gru(p: &mut GruParams<f64>, alpha: f64, g: &GruParams<f64>) {
    let pairs = [
        (&mut p.wz, &g.wz),
        (&mut p.uz, &g.uz),
        (&mut p.bz, &g.bz),
        (&mut p.wr, &g.wr),
        (&mut p.ur, &g.ur),
        (&mut p.br, &g.br),
        (&mut p.wc, &g.wc),
        (&mut p.uc, &g.uc),
        (&mut p.bc, &g.bc),
    ];
    for (pv, gv) in pairs {
        for (a, b) in pv.iter_mut().zip(gv) {
            *a += alpha * b;
        }
    }
}

fn axpy_linear(p: &mut Linear<f64>, alpha: f64, g: &Linear<f64>) {
    for (a, b) in p.w.iter_mut().zip(&g.w) {
        *a += alpha * b;
    }
    for (a, b) in p.b.iter_mut().zip(&g.b) {
        *a += alpha * b;
    }
}

/// Discriminator parameters follow the adversarial classification gradient;
/// generator and decoder parameters follow the total-objective gradient.
fn apply_updates(
    params: &mut CrliParams<f64>,
    lr: f64,
    d_total: &CrliParams<f64>,
    d_adv_d: &CrliParams<f64>,
) {
    let a = -lr;
    for (layer, glayer) in params.gen_layers.iter_mut().zip(&d_total.gen_layers) {
        axpy_gru(&mut layer.fwd, a, &glayer.fwd);
        axpy_gru(&mut layer.bwd, a, &glayer.bwd);
    }
    axpy_linear(&mut params.proj, a, &d_total.proj);
    axpy_linear(&mut params.pre_head, a, &d_total.pre_head);
    axpy_linear(&mut params.dec_init, a, &d_total.dec_init);
    axpy_gru(&mut params.dec_gru, a, &d_total.dec_gru);
    axpy_linear(&mut params.out_head, a, &d_total.out_head);
    for (gru, g) in params.disc_layers.iter_mut().zip(&d_adv_d.disc_layers) {
        axpy_gru(gru, a, g);
    }
    axpy_linear(&mut params.score_head, a, &d_adv_d.score_head);
}

pub fn train(ds: &CohortDataset, cfg: &CrliConfig) -> Result<CrliTrainResult, CrliError> {
    let n = ds.encounters.len();
    if n < cfg.k {
        return Err(CrliError::TooFewEncounters { n, k: cfg.k });
    }
    let dims = resolve_dims(cfg, ds)?;
    let mut params = CrliParams::init(&dims, cfg.seed);
    let mut f: Vec<Vec<f64>> = Vec::new();
    let mut history: Vec<LossBreakdown> = Vec::new();
    let mut best = f64::INFINITY;
    let mut epochs_without_improvement = 0usize;
    for epoch in 0..cfg.max_epochs {
        let caches = forward_cohort::<f64>(&params, ds);
        if epoch % cfg.f_update_interval == 0 {
            let h: LatentMatrix = caches.iter().map(|c| c.h_enc.clone()).collect();
            f = update_f(&h, cfg.k);
        }
        let terms = compute_loss_terms(&params, &caches, ds, &f, cfg.lambda_kmeans);
        let breakdown = LossBreakdown::from_terms(&terms);
        if !breakdown.all_finite() {
            return Err(CrliError::Divergence { epoch });
        }
        history.push(breakdown);
        let (d_total, d_adv_d) = backward_cohort(&params, &caches, ds, &f, cfg.lambda_kmeans);
        apply_updates(&mut params, cfg.learning_rate, &d_total, &d_adv_d);
        if !params.all_finite() {
            return Err(CrliError::Divergence { epoch });
        }
        if breakdown.total_g < best - IMPROVEMENT_TOL {
            best = breakdown.total_g;
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }
    let latent = super::encode(ds, &params);
    let km = kmeans_euclidean(
        &latent,
        cfg.k,
        FINAL_KMEANS_RESTARTS,
        FINAL_KMEANS_MAX_ITER,
        cfg.seed,
    );
    let labels: BTreeMap<String, usize> = ds
        .encounters
        .iter()
        .zip(&km.labels)
        .map(|(e, &l)| (e.encounter_id.clone(), l))
        .collect();
    let centers = km
        .centers
        .into_iter()
        .map(|c| Grid::from_time_major(1, dims.latent, c))
        .collect();
    let assignment = ClusterAssignment {
        labels,
        inertia: km.inertia,
        centers,
        k: cfg.k,
        method: ClusterMethod::Crli,
    };
    Ok(CrliTrainResult {
        params,
        latent,
        assignment,
        loss_history: history,
    })
}

//! Hand-derived backpropagation through time for the CRLI network. This is
//! the fast f64 gradient path used by training; its correctness is checked
//! against both the tape engine and central finite differences.

use super::model::{CrliParams, EncounterCache, GenLayer, GruCache, GruParams, Linear};
use super::tape::sigmoid_f64;
use crate::cohort::CohortDataset;

/// Backward through one GRU step. Accumulates parameter gradients into `g`
/// and input gradients into `dx`; returns the gradient w.r.t. `h_prev`.
fn gru_backward(
    p: &GruParams<f64>,
    g: &mut GruParams<f64>,
    cache: &GruCache<f64>,
    x: &[f64],
    h_prev: &[f64],
    dh: &[f64],
    dx: &mut [f64],
) -> Vec<f64> {
    let h_dim = p.hidden_dim;
    let in_dim = p.input_dim;
    let (z, r, c) = (&cache.z, &cache.r, &cache.c);
    // h = (1-z) * h_prev + z * c
    let mut da_z = vec![0.0; h_dim];
    let mut da_c = vec![0.0; h_dim];
    for i in 0..h_dim {
        let dz = dh[i] * (c[i] - h_prev[i]);
        da_z[i] = dz * z[i] * (1.0 - z[i]);
        let dc = dh[i] * z[i];
        da_c[i] = dc * (1.0 - c[i] * c[i]);
    }
    // a_c = Wc x + Uc (r .* h_prev) + bc
    let mut uct_dac = vec![0.0; h_dim];
    for i in 0..h_dim {
        if da_c[i] != 0.0 {
            for (acc, &ucij) in uct_dac.iter_mut().zip(&p.uc[i * h_dim..(i + 1) * h_dim]) {
                *acc += ucij * da_c[i];
            }
        }
    }
    let mut da_r = vec![0.0; h_dim];
    let mut dh_prev = vec![0.0; h_dim];
    for j in 0..h_dim {
        let dr = uct_dac[j] * h_prev[j];
        da_r[j] = dr * r[j] * (1.0 - r[j]);
        dh_prev[j] = dh[j] * (1.0 - z[j]) + uct_dac[j] * r[j];
    }
    for i in 0..h_dim {
        let (daz, dar, dac) = (da_z[i], da_r[i], da_c[i]);
        g.bz[i] += daz;
        g.br[i] += dar;
        g.bc[i] += dac;
        let row = i * in_dim..(i + 1) * in_dim;
        for (((gw, &xj), gwr), gwc) in g.wz[row.clone()]
            .iter_mut()
            .zip(x)
            .zip(g.wr[row.clone()].iter_mut())
            .zip(g.wc[row.clone()].iter_mut())
        {
            *gw += daz * xj;
            *gwr += dar * xj;
            *gwc += dac * xj;
        }
        let urow = i * h_dim..(i + 1) * h_dim;
        for ((((gu, &hj), gur), guc), &rj) in g.uz[urow.clone()]
            .iter_mut()
            .zip(h_prev)
            .zip(g.ur[urow.clone()].iter_mut())
            .zip(g.uc[urow.clone()].iter_mut())
            .zip(r)
        {
            *gu += daz * hj;
            *gur += dar * hj;
            *guc += dac * (rj * hj);
        }
        for ((dhp, &uzij), &urij) in dh_prev
            .iter_mut()
            .zip(&p.uz[urow.clone()])
            .zip(&p.ur[urow])
        {
            *dhp += uzij * daz + urij * dar;
        }
        for (((dxj, &wzij), &wrij), &wcij) in dx
            .iter_mut()
            .zip(&p.wz[row.clone()])
            .zip(&p.wr[row.clone()])
            .zip(&p.wc[row])
        {
            *dxj += wzij * daz + wrij * dar + wcij * dac;
        }
    }
    dh_prev
}

/// Backward through `y = W x + b`: accumulates into grads and `dx`.
fn linear_backward(lin: &Linear<f64>, g: &mut Linear<f64>, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..lin.out_dim {
        let dyi = dy[i];
        g.b[i] += dyi;
        let row = i * lin.in_dim..(i + 1) * lin.in_dim;
        for (((gw, &xj), dxj), &wij) in g.w[row.clone()]
            .iter_mut()
            .zip(x)
            .zip(dx.iter_mut())
            .zip(&lin.w[row])
        {
            *gw += dyi * xj;
            *dxj += wij * dyi;
        }
    }
}

/// Backward through one bidirectional generator layer, given per-time hidden
/// gradients for both directions; accumulates input gradients per time step.
fn layer_backward(
    layer: &GenLayer<f64>,
    glayer: &mut GenLayer<f64>,
    cache: &super::model::LayerCache<f64>,
    dh_fwd: &[Vec<f64>],
    dh_bwd_at: &[Vec<f64>],
    dx_out: &mut [Vec<f64>],
) {
    let t_len = cache.fwd.len();
    let h_dim = layer.fwd.hidden_dim;
    let zero = vec![0.0; h_dim];
    let mut carry = vec![0.0; h_dim];
    for t in (0..t_len).rev() {
        let mut dh: Vec<f64> = dh_fwd[t].clone();
        for (a, b) in dh.iter_mut().zip(&carry) {
            *a += b;
        }
        let h_prev = if t == 0 { &zero } else { &cache.fwd[t - 1].h };
        carry = gru_backward(
            &layer.fwd,
            &mut glayer.fwd,
            &cache.fwd[t],
            &cache.inputs[t],
            h_prev,
            &dh,
            &mut dx_out[t],
        );
    }
    // Backward direction caches are stored in processing order (time T-1
    // first); the recurrence carry flows in processing order.
    let mut carry = vec![0.0; h_dim];
    for p in (0..t_len).rev() {
        let t = t_len - 1 - p;
        let mut dh: Vec<f64> = dh_bwd_at[t].clone();
        for (a, b) in dh.iter_mut().zip(&carry) {
            *a += b;
        }
        let h_prev = if p == 0 { &zero } else { &cache.bwd[p - 1].h };
        carry = gru_backward(
            &layer.bwd,
            &mut glayer.bwd,
            &cache.bwd[p],
            &cache.inputs[t],
            h_prev,
            &dh,
            &mut dx_out[t],
        );
    }
}

/// Backward through the discriminator stack from per-cell score gradients;
/// returns gradients w.r.t. the discriminator input cells.
fn disc_backward(
    params: &CrliParams<f64>,
    grads: &mut CrliParams<f64>,
    cache: &EncounterCache<f64>,
    dscores: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let t_len = dscores.len();
    let n_layers = params.disc_layers.len();
    let top_hidden = params.disc_layers.last().unwrap().hidden_dim;
    let mut dh_seq: Vec<Vec<f64>> = vec![vec![0.0; top_hidden]; t_len];
    for t in 0..t_len {
        let top_h = &cache.disc_layers[n_layers - 1][t].h;
        linear_backward(
            &params.score_head,
            &mut grads.score_head,
            top_h,
            &dscores[t],
            &mut dh_seq[t],
        );
    }
    for layer in (0..n_layers).rev() {
        let gru = &params.disc_layers[layer];
        let in_dim = gru.input_dim;
        let zero = vec![0.0; gru.hidden_dim];
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; t_len];
        let mut carry = vec![0.0; gru.hidden_dim];
        for t in (0..t_len).rev() {
            let mut dh = dh_seq[t].clone();
            for (a, b) in dh.iter_mut().zip(&carry) {
                *a += b;
            }
            let x = if layer == 0 {
                &cache.disc_input[t]
            } else {
                &cache.disc_layers[layer - 1][t].h
            };
            let h_prev = if t == 0 {
                &zero
            } else {
                &cache.disc_layers[layer][t - 1].h
            };
            carry = gru_backward(
                gru,
                &mut grads.disc_layers[layer],
                &cache.disc_layers[layer][t],
                x,
                h_prev,
                &dh,
                &mut dx[t],
            );
        }
        dh_seq = dx;
    }
    dh_seq
}

/// Full backward pass over the cohort.
///
/// Returns `(d_total_g, d_adv_d)`: the gradient of the total generator
/// objective with respect to every parameter (discriminator gradients flow
/// through l_adv_g), and the gradient of l_adv_d with respect to the
/// discriminator parameters.
pub fn backward_cohort(
    params: &CrliParams<f64>,
    caches: &[EncounterCache<f64>],
    ds: &CohortDataset,
    f: &[Vec<f64>],
    lambda: f64,
) -> (CrliParams<f64>, CrliParams<f64>) {
    let mut d_total = params.map(&mut |_| 0.0);
    let mut d_adv_d = params.map(&mut |_| 0.0);
    let (n_observed, n_imputed, n_all) = super::model::cell_counts(ds);
    let latent = params.proj.out_dim;
    let k = f.first().map_or(0, |row| row.len());
    // F^T H, for the l_kmeans gradient 2H - 2F(F^T H), scaled by lambda.
    let mut fth = vec![vec![0.0; latent]; k];
    for (i, cache) in caches.iter().enumerate() {
        for c in 0..k {
            for j in 0..latent {
                fth[c][j] += f[i][c] * cache.h_enc[j];
            }
        }
    }
    let gen_top_hidden = params.gen_layers.last().unwrap().fwd.hidden_dim;
    for (i, (cache, e)) in caches.iter().zip(&ds.encounters).enumerate() {
        let t_len = e.values.n_timesteps();
        let d = e.values.n_features();
        // ---- Seeds ----
        let mut dpred: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut dscore_g: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut dscore_d: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut ddec_out: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            for fi in 0..d {
                let value = e.values.get(fi, t);
                let observed = e.observed_mask.get(fi, t);
                let s = cache.scores[t][fi];
                let y = if observed { 1.0 } else { 0.0 };
                dscore_d[t][fi] = (sigmoid_f64(s) - y) / n_all as f64;
                if observed {
                    if n_observed > 0 {
                        dpred[t][fi] =
                            2.0 * (cache.preds[t][fi] - value) / n_observed as f64;
                    }
                } else if n_imputed > 0 {
                    // Generator wants imputed cells scored as real (label 1).
                    dscore_g[t][fi] = (sigmoid_f64(s) - 1.0) / n_imputed as f64;
                }
                ddec_out[t][fi] = 2.0 * (cache.dec_out[t][fi] - value) / n_all as f64;
            }
        }
        // ---- Discriminator ----
        disc_backward(params, &mut d_adv_d, cache, &dscore_d);
        let dinput_g = disc_backward(params, &mut d_total, cache, &dscore_g);
        // Imputed discriminator-input cells are generator predictions.
        for t in 0..t_len {
            for fi in 0..d {
                if !e.observed_mask.get(fi, t) {
                    dpred[t][fi] += dinput_g[t][fi];
                }
            }
        }
        // ---- Decoder ----
        let mut dh_enc = vec![0.0; latent];
        for j in 0..latent {
            let mut ff = 0.0;
            for c in 0..k {
                ff += f[i][c] * fth[c][j];
            }
            dh_enc[j] = lambda * (2.0 * cache.h_enc[j] - 2.0 * ff);
        }
        let mut carry = vec![0.0; latent];
        for t in (0..t_len).rev() {
            let mut dh = vec![0.0; latent];
            linear_backward(
                &params.out_head,
                &mut d_total.out_head,
                &cache.dec_steps[t].h,
                &ddec_out[t],
                &mut dh,
            );
            for (a, b) in dh.iter_mut().zip(&carry) {
                *a += b;
            }
            let h_prev = if t == 0 {
                &cache.dec_h0
            } else {
                &cache.dec_steps[t - 1].h
            };
            let mut dx_unused: [f64; 0] = [];
            carry = gru_backward(
                &params.dec_gru,
                &mut d_total.dec_gru,
                &cache.dec_steps[t],
                &[],
                h_prev,
                &dh,
                &mut dx_unused,
            );
        }
        // carry is now d h0; back through the tanh init projection.
        let da: Vec<f64> = carry
            .iter()
            .zip(&cache.dec_h0)
            .map(|(&g, &h0)| g * (1.0 - h0 * h0))
            .collect();
        linear_backward(
            &params.dec_init,
            &mut d_total.dec_init,
            &cache.h_enc,
            &da,
            &mut dh_enc,
        );
        // ---- Latent projection ----
        let top = cache.layers.last().unwrap();
        let mut enc_in = top.fwd[t_len - 1].h.clone();
        enc_in.extend_from_slice(top.bwd_h_at(0));
        let mut denc_in = vec![0.0; 2 * gen_top_hidden];
        linear_backward(&params.proj, &mut d_total.proj, &enc_in, &dh_enc, &mut denc_in);
        // ---- Prediction heads ----
        let mut dh_fwd: Vec<Vec<f64>> = vec![vec![0.0; gen_top_hidden]; t_len];
        let mut dh_bwd_at: Vec<Vec<f64>> = vec![vec![0.0; gen_top_hidden]; t_len];
        dh_fwd[t_len - 1]
            .iter_mut()
            .zip(&denc_in[..gen_top_hidden])
            .for_each(|(a, b)| *a += b);
        dh_bwd_at[0]
            .iter_mut()
            .zip(&denc_in[gen_top_hidden..])
            .for_each(|(a, b)| *a += b);
        let zero_ctx = vec![0.0; gen_top_hidden];
        for t in 0..t_len {
            if dpred[t].iter().all(|&v| v == 0.0) {
                continue;
            }
            let before = if t == 0 { &zero_ctx } else { &top.fwd[t - 1].h };
            let after = if t + 1 == t_len {
                &zero_ctx
            } else {
                top.bwd_h_at(t + 1)
            };
            let mut ctx = before.clone();
            ctx.extend_from_slice(after);
            let mut dctx = vec![0.0; 2 * gen_top_hidden];
            linear_backward(
                &params.pre_head,
                &mut d_total.pre_head,
                &ctx,
                &dpred[t],
                &mut dctx,
            );
            if t > 0 {
                dh_fwd[t - 1]
                    .iter_mut()
                    .zip(&dctx[..gen_top_hidden])
                    .for_each(|(a, b)| *a += b);
            }
            if t + 1 < t_len {
                dh_bwd_at[t + 1]
                    .iter_mut()
                    .zip(&dctx[gen_top_hidden..])
                    .for_each(|(a, b)| *a += b);
            }
        }
        // ---- Generator stack, top layer down ----
        for layer in (0..params.gen_layers.len()).rev() {
            let in_dim = params.gen_layers[layer].fwd.input_dim;
            let mut dx: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; t_len];
            layer_backward(
                &params.gen_layers[layer],
                &mut d_total.gen_layers[layer],
                &cache.layers[layer],
                &dh_fwd,
                &dh_bwd_at,
                &mut dx,
            );
            if layer > 0 {
                let below = params.gen_layers[layer - 1].fwd.hidden_dim;
                dh_fwd = vec![vec![0.0; below]; t_len];
                dh_bwd_at = vec![vec![0.0; below]; t_len];
                for t in 0..t_len {
                    dh_fwd[t].copy_from_slice(&dx[t][..below]);
                    dh_bwd_at[t].copy_from_slice(&dx[t][below..]);
                }
            }
        }
    }
    (d_total, d_adv_d)
}

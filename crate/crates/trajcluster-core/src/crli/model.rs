//! Network definition: parameter containers and the forward pass, written
//! once over the `Real` abstraction so it serves both the fast f64 training
//! path and the tape-verified path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::cohort::CohortDataset;

/// Standard GRU cell parameters: update gate z, reset gate r, candidate c.
/// Weight layout is row-major [hidden x input] / [hidden x hidden].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams<S> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub wz: Vec<S>,
    pub uz: Vec<S>,
    pub bz: Vec<S>,
    pub wr: Vec<S>,
    pub ur: Vec<S>,
    pub br: Vec<S>,
    pub wc: Vec<S>,
    pub uc: Vec<S>,
    pub bc: Vec<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

/// One bidirectional generator layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLayer<S> {
    pub fwd: GruParams<S>,
    pub bwd: GruParams<S>,
}

/// All trainable parameters of the CRLI network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrliParams<S> {
    pub gen_layers: Vec<GenLayer<S>>,
    /// [2*gen_hidden] -> latent projection producing the clustering latent.
    pub proj: Linear<S>,
    /// [2*gen_hidden] -> d next-step prediction head.
    pub pre_head: Linear<S>,
    /// latent -> latent, tanh-activated, giving the decoder's initial state.
    pub dec_init: Linear<S>,
    /// Zero-input decoder GRU with hidden = latent.
    pub dec_gru: GruParams<S>,
    /// latent -> d reconstruction head.
    pub out_head: Linear<S>,
    pub disc_layers: Vec<GruParams<S>>,
    /// disc_hidden -> d per-cell realness scores.
    pub score_head: Linear<S>,
}

/// Concrete layer sizes resolved from a config and a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrliDims {
    pub d: usize,
    pub t: usize,
    pub latent: usize,
    pub gen_hidden: usize,
    pub gen_layers: usize,
    pub disc_hidden: usize,
    pub disc_layers: usize,
}

fn gru_zeros(input_dim: usize, hidden_dim: usize) -> GruParams<f64> {
    GruParams {
        input_dim,
        hidden_dim,
        wz: vec![0.0; hidden_dim * input_dim],
        uz: vec![0.0; hidden_dim * hidden_dim],
        bz: vec![0.0; hidden_dim],
        wr: vec![0.0; hidden_dim * input_dim],
        ur: vec![0.0; hidden_dim * hidden_dim],
        br: vec![0.0; hidden_dim],
        wc: vec![0.0; hidden_dim * input_dim],
        uc: vec![0.0; hidden_dim * hidden_dim],
        bc: vec![0.0; hidden_dim],
    }
}

fn linear_zeros(in_dim: usize, out_dim: usize) -> Linear<f64> {
    Linear {
        in_dim,
        out_dim,
        w: vec![0.0; out_dim * in_dim],
        b: vec![0.0; out_dim],
    }
}

impl CrliParams<f64> {
    /// All-zero parameters with the given shapes.
    pub fn zeros(dims: &CrliDims) -> CrliParams<f64> {
        let g = dims.gen_hidden;
        let mut gen_layers = Vec::with_capacity(dims.gen_layers);
        for layer in 0..dims.gen_layers {
            let input = if layer == 0 { dims.d } else { 2 * g };
            gen_layers.push(GenLayer {
                fwd: gru_zeros(input, g),
                bwd: gru_zeros(input, g),
            });
        }
        let mut disc_layers = Vec::with_capacity(dims.disc_layers);
        for layer in 0..dims.disc_layers {
            let input = if layer == 0 { dims.d } else { dims.disc_hidden };
            disc_layers.push(gru_zeros(input, dims.disc_hidden));
        }
        CrliParams {
            gen_layers,
            proj: linear_zeros(2 * g, dims.latent),
            pre_head: linear_zeros(2 * g, dims.d),
            dec_init: linear_zeros(dims.latent, dims.latent),
            dec_gru: gru_zeros(0, dims.latent),
            out_head: linear_zeros(dims.latent, dims.d),
            disc_layers,
            score_head: linear_zeros(dims.disc_hidden, dims.d),
        }
    }

    /// Small uniform initialization, deterministic in `seed`.
    pub fn init(dims: &CrliDims, seed: u64) -> CrliParams<f64> {
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for vec in params.vecs_mut() {
            for v in vec.iter_mut() {
                *v = rng.gen_range(-0.08..0.08);
            }
        }
        params
    }

    /// In-place gradient-descent update.
    pub fn axpy(&mut self, alpha: f64, grads: &CrliParams<f64>) {
        let mut gs: Vec<&Vec<f64>> = Vec::new();
        grads.collect_vecs(&mut gs);
        for (param, grad) in self.vecs_mut().into_iter().zip(gs) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p += alpha * g;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut vs: Vec<&Vec<f64>> = Vec::new();
        self.collect_vecs(&mut vs);
        vs.into_iter().flatten().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for vec in self.vecs_mut() {
            let len = vec.len();
            vec.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len());
    }

    pub fn n_params(&self) -> usize {
        let mut vs: Vec<&Vec<f64>> = Vec::new();
        self.collect_vecs(&mut vs);
        vs.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        let mut vs: Vec<&Vec<f64>> = Vec::new();
        self.collect_vecs(&mut vs);
        vs.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl<S: Copy> CrliParams<S> {
    /// Every parameter vector in a fixed traversal order.
    pub fn collect_vecs<'a>(&'a self, out: &mut Vec<&'a Vec<S>>) {
        for layer in &self.gen_layers {
            for gru in [&layer.fwd, &layer.bwd] {
                out.extend([
                    &gru.wz, &gru.uz, &gru.bz, &gru.wr, &gru.ur, &gru.br, &gru.wc, &gru.uc,
                    &gru.bc,
                ]);
            }
        }
        out.extend([&self.proj.w, &self.proj.b, &self.pre_head.w, &self.pre_head.b]);
        out.extend([&self.dec_init.w, &self.dec_init.b]);
        out.extend([
            &self.dec_gru.wz,
            &self.dec_gru.uz,
            &self.dec_gru.bz,
            &self.dec_gru.wr,
            &self.dec_gru.ur,
            &self.dec_gru.br,
            &self.dec_gru.wc,
            &self.dec_gru.uc,
            &self.dec_gru.bc,
        ]);
        out.extend([&self.out_head.w, &self.out_head.b]);
        for gru in &self.disc_layers {
            out.extend([
                &gru.wz, &gru.uz, &gru.bz, &gru.wr, &gru.ur, &gru.br, &gru.wc, &gru.uc, &gru.bc,
            ]);
        }
        out.extend([&self.score_head.w, &self.score_head.b]);
    }

    pub fn vecs_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out: Vec<&mut Vec<S>> = Vec::new();
        for layer in &mut self.gen_layers {
            for gru in [&mut layer.fwd, &mut layer.bwd] {
                out.extend([
                    &mut gru.wz,
                    &mut gru.uz,
                    &mut gru.bz,
                    &mut gru.wr,
                    &mut gru.ur,
                    &mut gru.br,
                    &mut gru.wc,
                    &mut gru.uc,
                    &mut gru.bc,
                ]);
            }
        }
        out.extend([
            &mut self.proj.w,
            &mut self.proj.b,
            &mut self.pre_head.w,
            &mut self.pre_head.b,
        ]);
        out.extend([&mut self.dec_init.w, &mut self.dec_init.b]);
        out.extend([
            &mut self.dec_gru.wz,
            &mut self.dec_gru.uz,
            &mut self.dec_gru.bz,
            &mut self.dec_gru.wr,
            &mut self.dec_gru.ur,
            &mut self.dec_gru.br,
            &mut self.dec_gru.wc,
            &mut self.dec_gru.uc,
            &mut self.dec_gru.bc,
        ]);
        out.extend([&mut self.out_head.w, &mut self.out_head.b]);
        for gru in &mut self.disc_layers {
            out.extend([
                &mut gru.wz,
                &mut gru.uz,
                &mut gru.bz,
                &mut gru.wr,
                &mut gru.ur,
                &mut gru.br,
                &mut gru.wc,
                &mut gru.uc,
                &mut gru.bc,
            ]);
        }
        out.extend([&mut self.score_head.w, &mut self.score_head.b]);
        out
    }

    /// Structure-preserving element map (used to lift f64 parameters onto a
    /// differentiation tape).
    pub fn map<T: Copy>(&self, f: &mut impl FnMut(S) -> T) -> CrliParams<T> {
        let map_vec = |v: &Vec<S>, f: &mut dyn FnMut(S) -> T| v.iter().map(|&x| f(x)).collect();
        let map_gru = |g: &GruParams<S>, f: &mut dyn FnMut(S) -> T| GruParams {
            input_dim: g.input_dim,
            hidden_dim: g.hidden_dim,
            wz: map_vec(&g.wz, f),
            uz: map_vec(&g.uz, f),
            bz: map_vec(&g.bz, f),
            wr: map_vec(&g.wr, f),
            ur: map_vec(&g.ur, f),
            br: map_vec(&g.br, f),
            wc: map_vec(&g.wc, f),
            uc: map_vec(&g.uc, f),
            bc: map_vec(&g.bc, f),
        };
        let map_lin = |l: &Linear<S>, f: &mut dyn FnMut(S) -> T| Linear {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            w: map_vec(&l.w, f),
            b: map_vec(&l.b, f),
        };
        CrliParams {
            gen_layers: self
                .gen_layers
                .iter()
                .map(|layer| GenLayer {
                    fwd: map_gru(&layer.fwd, f),
                    bwd: map_gru(&layer.bwd, f),
                })
                .collect(),
            proj: map_lin(&self.proj, f),
            pre_head: map_lin(&self.pre_head, f),
            dec_init: map_lin(&self.dec_init, f),
            dec_gru: map_gru(&self.dec_gru, f),
            out_head: map_lin(&self.out_head, f),
            disc_layers: self.disc_layers.iter().map(|g| map_gru(g, f)).collect(),
            score_head: map_lin(&self.score_head, f),
        }
    }
}

/// Per-step activations the backward pass needs. Step inputs and previous
/// hidden states are not duplicated here; they are recovered from the owning
/// sequence cache (layer inputs, neighboring steps, or the initial state).
#[derive(Debug, Clone)]
pub struct GruCache<S> {
    pub z: Vec<S>,
    pub r: Vec<S>,
    pub c: Vec<S>,
    pub h: Vec<S>,
}

fn zeros<S: Real>(proto: S, n: usize) -> Vec<S> {
    vec![proto.lit(0.0); n]
}

/// One GRU step; `x` may be empty for zero-input cells.
pub fn gru_step<S: Real>(p: &GruParams<S>, x: &[S], h_prev: &[S]) -> GruCache<S> {
    let h_dim = p.hidden_dim;
    let in_dim = p.input_dim;
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(h_prev.len(), h_dim);
    let gate = |w: &[S], u: &[S], b: &[S], gated_h: &[S]| -> Vec<S> {
        (0..h_dim)
            .map(|i| {
                let mut acc = b[i];
                for (&wij, &xj) in w[i * in_dim..(i + 1) * in_dim].iter().zip(x) {
                    acc = acc.add(wij.mul(xj));
                }
                for (&uij, &hj) in u[i * h_dim..(i + 1) * h_dim].iter().zip(gated_h) {
                    acc = acc.add(uij.mul(hj));
                }
                acc
            })
            .collect()
    };
    // The z and r pre-activations share their inputs; accumulating both in one
    // pass interleaves two independent dependency chains.
    let mut z = Vec::with_capacity(h_dim);
    let mut r = Vec::with_capacity(h_dim);
    for i in 0..h_dim {
        let mut az = p.bz[i];
        let mut ar = p.br[i];
        let row = i * in_dim..(i + 1) * in_dim;
        for ((&wzij, &wrij), &xj) in p.wz[row.clone()].iter().zip(&p.wr[row]).zip(x) {
            az = az.add(wzij.mul(xj));
            ar = ar.add(wrij.mul(xj));
        }
        let urow = i * h_dim..(i + 1) * h_dim;
        for ((&uzij, &urij), &hj) in p.uz[urow.clone()].iter().zip(&p.ur[urow]).zip(h_prev) {
            az = az.add(uzij.mul(hj));
            ar = ar.add(urij.mul(hj));
        }
        z.push(az.sigmoid());
        r.push(ar.sigmoid());
    }
    let rh: Vec<S> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri.mul(hi)).collect();
    let c: Vec<S> = gate(&p.wc, &p.uc, &p.bc, &rh)
        .into_iter()
        .map(|a| a.tanh())
        .collect();
    let h: Vec<S> = (0..h_dim)
        .map(|i| {
            // h = (1-z) * h_prev + z * c
            h_prev[i]
                .sub(z[i].mul(h_prev[i]))
                .add(z[i].mul(c[i]))
        })
        .collect();
    GruCache { z, r, c, h }
}

pub fn affine<S: Real>(lin: &Linear<S>, x: &[S]) -> Vec<S> {
    debug_assert_eq!(x.len(), lin.in_dim);
    (0..lin.out_dim)
        .map(|i| {
            let mut acc = lin.b[i];
            for (&wij, &xj) in lin.w[i * lin.in_dim..(i + 1) * lin.in_dim].iter().zip(x) {
                acc = acc.add(wij.mul(xj));
            }
            acc
        })
        .collect()
}

/// One bidirectional generator layer over a sequence. Backward caches are
/// stored in processing order (t = T-1 first).
#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    /// Step inputs to this layer, T x in_dim.
    pub inputs: Vec<Vec<S>>,
    pub fwd: Vec<GruCache<S>>,
    pub bwd: Vec<GruCache<S>>,
}

impl<S: Copy> LayerCache<S> {
    /// Backward-direction hidden state aligned to original time index.
    pub fn bwd_h_at(&self, t: usize) -> &Vec<S> {
        &self.bwd[self.bwd.len() - 1 - t].h
    }
}

/// Full forward cache for one encounter.
#[derive(Debug, Clone)]
pub struct EncounterCache<S> {
    pub layers: Vec<LayerCache<S>>,
    pub h_enc: Vec<S>,
    /// Next-step predictions, T x d.
    pub preds: Vec<Vec<S>>,
    pub dec_h0: Vec<S>,
    pub dec_steps: Vec<GruCache<S>>,
    /// Reconstructions, T x d.
    pub dec_out: Vec<Vec<S>>,
    /// Observed value or generator prediction per cell, T x d.
    pub disc_input: Vec<Vec<S>>,
    pub disc_layers: Vec<Vec<GruCache<S>>>,
    /// Realness logits, T x d.
    pub scores: Vec<Vec<S>>,
}

fn run_layer<S: Real>(layer: &GenLayer<S>, inputs: Vec<Vec<S>>, proto: S) -> LayerCache<S> {
    let t_len = inputs.len();
    let h_dim = layer.fwd.hidden_dim;
    let zero = zeros(proto, h_dim);
    let mut fwd: Vec<GruCache<S>> = Vec::with_capacity(t_len);
    for x in &inputs {
        let h_prev = fwd.last().map_or(&zero, |c| &c.h);
        fwd.push(gru_step(&layer.fwd, x, h_prev));
    }
    let mut bwd: Vec<GruCache<S>> = Vec::with_capacity(t_len);
    for x in inputs.iter().rev() {
        let h_prev = bwd.last().map_or(&zero, |c| &c.h);
        bwd.push(gru_step(&layer.bwd, x, h_prev));
    }
    LayerCache { inputs, fwd, bwd }
}

/// Forward pass over one encounter: generator stack, latent, prediction
/// heads, decoder rollout, and discriminator scores.
pub fn forward_encounter<S: Real>(
    params: &CrliParams<S>,
    values: &crate::grid::Grid<f64>,
    mask: &crate::grid::Grid<bool>,
) -> EncounterCache<S> {
    let proto = params.proj.b[0];
    let d = values.n_features();
    let t_len = values.n_timesteps();
    let g = params.gen_layers.last().unwrap().fwd.hidden_dim;
    // Generator stack.
    let mut inputs: Vec<Vec<S>> = (0..t_len)
        .map(|t| values.step(t).iter().map(|&v| proto.lit(v)).collect())
        .collect();
    let mut layers = Vec::with_capacity(params.gen_layers.len());
    for layer in &params.gen_layers {
        let cache = run_layer(layer, inputs, proto);
        inputs = (0..t_len)
            .map(|t| {
                let mut row = cache.fwd[t].h.clone();
                row.extend_from_slice(cache.bwd_h_at(t));
                row
            })
            .collect();
        layers.push(cache);
    }
    let top = layers.last().unwrap();
    // Latent: projection of [last forward state ; first-time backward state].
    let mut enc_in = top.fwd[t_len - 1].h.clone();
    enc_in.extend_from_slice(top.bwd_h_at(0));
    let h_enc = affine(&params.proj, &enc_in);
    // Next-step predictions from temporal context.
    let zero_ctx = zeros(proto, g);
    let preds: Vec<Vec<S>> = (0..t_len)
        .map(|t| {
            let before = if t == 0 { &zero_ctx } else { &top.fwd[t - 1].h };
            let after = if t + 1 == t_len {
                &zero_ctx
            } else {
                top.bwd_h_at(t + 1)
            };
            let mut ctx = before.clone();
            ctx.extend_from_slice(after);
            affine(&params.pre_head, &ctx)
        })
        .collect();
    // Decoder rollout with zero inputs.
    let dec_h0: Vec<S> = affine(&params.dec_init, &h_enc)
        .into_iter()
        .map(|a| a.tanh())
        .collect();
    let mut dec_steps: Vec<GruCache<S>> = Vec::with_capacity(t_len);
    let mut dec_out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let h_prev = dec_steps.last().map_or(&dec_h0, |c| &c.h);
        let cache = gru_step(&params.dec_gru, &[], h_prev);
        dec_out.push(affine(&params.out_head, &cache.h));
        dec_steps.push(cache);
    }
    // Discriminator sees observed values and generator predictions elsewhere.
    let disc_input: Vec<Vec<S>> = (0..t_len)
        .map(|t| {
            (0..d)
                .map(|f| {
                    if mask.get(f, t) {
                        proto.lit(values.get(f, t))
                    } else {
                        preds[t][f]
                    }
                })
                .collect()
        })
        .collect();
    let mut disc_layer_caches: Vec<Vec<GruCache<S>>> =
        Vec::with_capacity(params.disc_layers.len());
    for (l, gru) in params.disc_layers.iter().enumerate() {
        let zero = zeros(proto, gru.hidden_dim);
        let mut caches: Vec<GruCache<S>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = if l == 0 {
                &disc_input[t]
            } else {
                &disc_layer_caches[l - 1][t].h
            };
            let h_prev = caches.last().map_or(&zero, |c| &c.h);
            caches.push(gru_step(gru, x, h_prev));
        }
        disc_layer_caches.push(caches);
    }
    let scores: Vec<Vec<S>> = disc_layer_caches
        .last()
        .unwrap()
        .iter()
        .map(|c| affine(&params.score_head, &c.h))
        .collect();
    EncounterCache {
        layers,
        h_enc,
        preds,
        dec_h0,
        dec_steps,
        dec_out,
        disc_input,
        disc_layers: disc_layer_caches,
        scores,
    }
}

/// Forward over the whole cohort, in dataset order.
pub fn forward_cohort<S: Real>(
    params: &CrliParams<S>,
    ds: &CohortDataset,
) -> Vec<EncounterCache<S>> {
    ds.encounters
        .iter()
        .map(|e| forward_encounter(params, &e.values, &e.observed_mask))
        .collect()
}

/// Generic loss terms; the total generator objective is
/// l_pre + l_rec + l_adv_g + lambda * l_kmeans.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<S> {
    pub l_pre: S,
    pub l_rec: S,
    pub l_adv_d: S,
    pub l_adv_g: S,
    pub l_kmeans: S,
    pub total_g: S,
}

/// Binary cross-entropy with logits in the numerically stable form
/// max(s,0) - s*y + ln(1 + e^{-|s|}).
fn bce<S: Real>(score: S, label: f64) -> S {
    score
        .relu()
        .sub(score.scale(label))
        .add(score.abs().neg().softplus())
}

/// Cell counts the loss means divide by.
pub fn cell_counts(ds: &CohortDataset) -> (usize, usize, usize) {
    let mut observed = 0;
    let mut imputed = 0;
    for e in &ds.encounters {
        for t in 0..e.values.n_timesteps() {
            for f in 0..e.values.n_features() {
                if e.observed_mask.get(f, t) {
                    observed += 1;
                } else {
                    imputed += 1;
                }
            }
        }
    }
    (observed, imputed, observed + imputed)
}

/// All loss terms from a completed forward pass. `f` is the fixed orthonormal
/// [n x k] matrix of the spectral-relaxation K-means term.
pub fn compute_loss_terms<S: Real>(
    params: &CrliParams<S>,
    caches: &[EncounterCache<S>],
    ds: &CohortDataset,
    f: &[Vec<f64>],
    lambda: f64,
) -> LossTerms<S> {
    let proto = params.proj.b[0];
    let (n_observed, n_imputed, n_all) = cell_counts(ds);
    let mut l_pre = proto.lit(0.0);
    let mut l_rec = proto.lit(0.0);
    let mut l_adv_d = proto.lit(0.0);
    let mut l_adv_g = proto.lit(0.0);
    for (cache, e) in caches.iter().zip(&ds.encounters) {
        for t in 0..e.values.n_timesteps() {
            for fi in 0..e.values.n_features() {
                let value = e.values.get(fi, t);
                let observed = e.observed_mask.get(fi, t);
                if observed {
                    let diff = cache.preds[t][fi].add_const(-value);
                    l_pre = l_pre.add(diff.mul(diff));
                }
                let diff = cache.dec_out[t][fi].add_const(-value);
                l_rec = l_rec.add(diff.mul(diff));
                let score = cache.scores[t][fi];
                l_adv_d = l_adv_d.add(bce(score, if observed { 1.0 } else { 0.0 }));
                if !observed {
                    l_adv_g = l_adv_g.add(bce(score, 1.0));
                }
            }
        }
    }
    if n_observed > 0 {
        l_pre = l_pre.scale(1.0 / n_observed as f64);
    }
    l_rec = l_rec.scale(1.0 / n_all as f64);
    l_adv_d = l_adv_d.scale(1.0 / n_all as f64);
    if n_imputed > 0 {
        l_adv_g = l_adv_g.scale(1.0 / n_imputed as f64);
    }
    // l_kmeans = tr(H^T H) - tr(F^T H H^T F), with F held constant.
    let latent = params.proj.out_dim;
    let k = f.first().map_or(0, |row| row.len());
    let mut l_kmeans = proto.lit(0.0);
    for cache in caches {
        for &h in &cache.h_enc {
            l_kmeans = l_kmeans.add(h.mul(h));
        }
    }
    for c in 0..k {
        for j in 0..latent {
            let mut acc = proto.lit(0.0);
            for (i, cache) in caches.iter().enumerate() {
                acc = acc.add(cache.h_enc[j].scale(f[i][c]));
            }
            l_kmeans = l_kmeans.sub(acc.mul(acc));
        }
    }
    let total_g = l_pre.add(l_rec).add(l_adv_g).add(l_kmeans.scale(lambda));
    LossTerms {
        l_pre,
        l_rec,
        l_adv_d,
        l_adv_g,
        l_kmeans,
        total_g,
    }
}

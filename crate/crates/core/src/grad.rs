//! Analytic gradients for adapter parameters.
//!
//! The backward pass propagates through the whole network but accumulates
//! gradients only into the training adapter's A/B matrices; base weights are
//! read-only throughout.

use crate::model::{
    forward_impl, rmsnorm_backward, BaseWeights, ForwardCache, LoraAdapter, ModelError, ProjRole,
};
use crate::tensor::Matrix;

/// Gradients aligned index-for-index with `LoraAdapter::targets`.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub targets: Vec<(Matrix, Matrix)>, // (dA, dB)
}

impl LoraGrads {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            targets: adapter
                .targets
                .iter()
                .map(|t| {
                    (Matrix::zeros(t.a.rows, t.a.cols), Matrix::zeros(t.b.rows, t.b.cols))
                })
                .collect(),
        }
    }
}

/// One training sequence with the index of its first answer token.
/// Predictions before `answer_from` count with the configured prompt
/// weight; everything from `answer_from` on counts fully.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub answer_from: usize,
}

impl TrainExample {
    /// Every position weighted equally.
    pub fn unmasked(tokens: Vec<u32>) -> Self {
        Self { tokens, answer_from: 1 }
    }
}

/// Mean per-token negative log-likelihood over the batch, plus gradients
/// for the adapter. Each batch entry is a full token sequence; position t
/// is predicted from the preceding tokens, so a sequence of length n yields
/// n - 1 predictions.
pub fn loss_and_grads(
    base: &BaseWeights,
    adapter: &LoraAdapter,
    batch: &[Vec<u32>],
) -> Result<(f64, LoraGrads), ModelError> {
    let examples: Vec<TrainExample> =
        batch.iter().map(|s| TrainExample::unmasked(s.clone())).collect();
    loss_and_grads_weighted(base, adapter, &examples, 1.0)
}

/// Weighted variant: the loss is the weighted mean of per-token NLL, with
/// prompt positions scaled by `prompt_weight` (1.0 recovers the plain mean).
pub fn loss_and_grads_weighted(
    base: &BaseWeights,
    adapter: &LoraAdapter,
    batch: &[TrainExample],
    prompt_weight: f64,
) -> Result<(f64, LoraGrads), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut weight_total = 0.0f64;
    for ex in batch {
        for i in 1..ex.tokens.len() {
            weight_total += if i >= ex.answer_from { 1.0 } else { prompt_weight };
        }
    }
    if weight_total <= 0.0 {
        return Err(ModelError::EmptyBatch);
    }
    let inv_total = 1.0 / weight_total;

    let mut grads = LoraGrads::zeros_like(adapter);
    let mut loss = 0.0;
    for ex in batch {
        let seq = &ex.tokens;
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let weights: Vec<f64> = (1..seq.len())
            .map(|i| if i >= ex.answer_from { 1.0 } else { prompt_weight })
            .collect();
        let active = vec![(adapter, 1.0)];
        let (_, cache) = forward_impl(base, &active, inputs, true)?;
        let cache = cache.expect("cache requested");
        for (t, &tgt) in targets.iter().enumerate() {
            loss -= cache.probs[t][tgt as usize].max(f64::MIN_POSITIVE).ln()
                * weights[t]
                * inv_total;
        }
        backward_seq(base, adapter, &cache, targets, &weights, inv_total, &mut grads);
    }
    Ok((loss, grads))
}

#[allow(clippy::needless_range_loop)]
fn backward_seq(
    base: &BaseWeights,
    adapter: &LoraAdapter,
    cache: &ForwardCache,
    targets: &[u32],
    weights: &[f64],
    loss_scale: f64,
    grads: &mut LoraGrads,
) {
    let cfg = &base.config;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let att_scale = 1.0 / (hd as f64).sqrt();
    let t_len = targets.len();
    let s = adapter.scaling();

    // cross-entropy at the unembedding
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        let mut dlogits = cache.probs[t].clone();
        dlogits[targets[t] as usize] -= 1.0;
        let scale = loss_scale * weights[t];
        for v in dlogits.iter_mut() {
            *v *= scale;
        }
        let d_xn = base.unembed.matvec_t(&dlogits);
        let dxf = rmsnorm_backward(&d_xn, &cache.x_final[t], cache.rms_f[t]);
        dx[t] = dxf;
    }

    for (l, lw) in base.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];

        // feed-forward block
        let mut dx_mid: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let d_mlp_out = &dx[t];
            let d_ha = lw.w2.matvec_t(d_mlp_out);
            let d_h1: Vec<f64> = d_ha
                .iter()
                .zip(&lc.h1[t])
                .map(|(g, &h)| g * crate::model::gelu_derivative(h))
                .collect();
            let d_xn_mlp = lw.w1.matvec_t(&d_h1);
            let d_norm = rmsnorm_backward(&d_xn_mlp, &lc.x_mid[t], lc.rms_m[t]);
            dx_mid.push(dx[t].iter().zip(&d_norm).map(|(a, b)| a + b).collect());
        }

        // attention block
        let mut d_q: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut d_k: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut d_v: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut d_ho: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for dxm in dx_mid.iter() {
            d_ho.push(lw.wo.matvec_t(dxm));
        }
        for h in 0..n_heads {
            let lo = h * hd;
            for t in 0..t_len {
                let aw = &lc.aw[h][t]; // t + 1 weights
                let dho_h = &d_ho[t][lo..lo + hd];
                // value gradients and attention-weight gradients
                let mut d_aw = vec![0.0; t + 1];
                for u in 0..=t {
                    let vh = &lc.v[u][lo..lo + hd];
                    let mut acc = 0.0;
                    for i in 0..hd {
                        d_v[u][lo + i] += aw[u] * dho_h[i];
                        acc += dho_h[i] * vh[i];
                    }
                    d_aw[u] = acc;
                }
                // softmax backward
                let dot: f64 = aw.iter().zip(&d_aw).map(|(a, b)| a * b).sum();
                for u in 0..=t {
                    let d_logit = aw[u] * (d_aw[u] - dot) * att_scale;
                    let kh = &lc.k[u][lo..lo + hd];
                    let qh = &lc.q[t][lo..lo + hd];
                    for i in 0..hd {
                        d_q[t][lo + i] += d_logit * kh[i];
                        d_k[u][lo + i] += d_logit * qh[i];
                    }
                }
            }
        }

        // projections; adapter gradients live here
        let q_idx = adapter.targets.iter().position(|t| t.layer == l && t.role == ProjRole::Query);
        let v_idx = adapter.targets.iter().position(|t| t.layer == l && t.role == ProjRole::Value);
        let mut d_xn: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            add_assign(&mut d_xn[t], &lw.wq.matvec_t(&d_q[t]));
            add_assign(&mut d_xn[t], &lw.wk.matvec_t(&d_k[t]));
            add_assign(&mut d_xn[t], &lw.wv.matvec_t(&d_v[t]));
        }
        if let Some(idx) = q_idx {
            let tg = &adapter.targets[idx];
            for t in 0..t_len {
                let u = &lc.lora_q_u[t];
                let bt_d = tg.b.matvec_t(&d_q[t]); // r
                let (da, db) = &mut grads.targets[idx];
                outer_add(db, &d_q[t], u, s);
                outer_add(da, &bt_d, &lc.xn_attn[t], s);
                let back = tg.a.matvec_t(&bt_d); // d
                for (o, v) in d_xn[t].iter_mut().zip(&back) {
                    *o += s * v;
                }
            }
        }
        if let Some(idx) = v_idx {
            let tg = &adapter.targets[idx];
            for t in 0..t_len {
                let u = &lc.lora_v_u[t];
                let bt_d = tg.b.matvec_t(&d_v[t]);
                let (da, db) = &mut grads.targets[idx];
                outer_add(db, &d_v[t], u, s);
                outer_add(da, &bt_d, &lc.xn_attn[t], s);
                let back = tg.a.matvec_t(&bt_d);
                for (o, v) in d_xn[t].iter_mut().zip(&back) {
                    *o += s * v;
                }
            }
        }

        // through the attention rmsnorm and residual
        for t in 0..t_len {
            let d_norm = rmsnorm_backward(&d_xn[t], &lc.x_in[t], lc.rms_a[t]);
            dx[t] = dx_mid[t].iter().zip(&d_norm).map(|(a, b)| a + b).collect();
        }
    }
    // gradients w.r.t. embeddings are dropped: the base is frozen
}

fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// m += scale * col ⊗ row
fn outer_add(m: &mut Matrix, col: &[f64], row: &[f64], scale: f64) {
    debug_assert_eq!(m.rows, col.len());
    debug_assert_eq!(m.cols, row.len());
    for (i, &c) in col.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let cs = c * scale;
        let mrow = &mut m.data[i * m.cols..(i + 1) * m.cols];
        for (o, r) in mrow.iter_mut().zip(row) {
            *o += cs * r;
        }
    }
}

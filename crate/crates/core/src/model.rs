//! A small decoder-only autoregressive transformer with frozen base weights
//! and pluggable low-rank adapters.
//!
//! The base is randomly initialized and never trained; all task knowledge
//! lives in adapters attached to the attention query and value projections.
//! Everything is f64 with fixed evaluation order: identical inputs give
//! bit-identical outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {0} out of range (vocab {1})")]
    TokenOutOfRange(u32, usize),
    #[error("sequence length {0} exceeds context length {1}")]
    SequenceTooLong(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("text must tokenize to at least 2 tokens, got {0}")]
    TextTooShort(usize),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("adapter shape mismatch: {0}")]
    AdapterMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank < 1 {
            return Err(ModelError::InvalidConfig("lora_rank must be >= 1".into()));
        }
        if self.context_len < 8 {
            return Err(ModelError::InvalidConfig("context_len must be >= 8".into()));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::InvalidConfig("vocab_size must cover specials".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Frozen transformer parameters. Nothing here is ever mutated after
/// initialization; adapters own all trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub unembed: Matrix,
}

/// Embedding initialization scale. Kept well below the variance-preserving
/// projection scale so an adapter's contribution to the residual stream can
/// overtake the frozen content within a short training run.
const EMBED_STD: f64 = 0.25;

pub fn init_model(config: &ModelConfig) -> Result<BaseWeights, ModelError> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed).split("base-weights");
    let d = config.d_model;
    let v = config.vocab_size;
    let proj_std = 1.0 / (d as f64).sqrt();
    let ff_std = 1.0 / (4.0 * d as f64).sqrt();
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: Matrix::gaussian(d, d, proj_std, &mut rng),
            wk: Matrix::gaussian(d, d, proj_std, &mut rng),
            wv: Matrix::gaussian(d, d, proj_std, &mut rng),
            wo: Matrix::gaussian(d, d, proj_std, &mut rng),
            w1: Matrix::gaussian(4 * d, d, proj_std, &mut rng),
            w2: Matrix::gaussian(d, 4 * d, ff_std, &mut rng),
        })
        .collect();
    Ok(BaseWeights {
        config: config.clone(),
        embed: Matrix::gaussian(v, d, EMBED_STD, &mut rng),
        pos: Matrix::gaussian(config.context_len, d, EMBED_STD, &mut rng),
        layers,
        unembed: Matrix::gaussian(v, d, proj_std, &mut rng),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjRole {
    Query,
    Value,
}

impl ProjRole {
    pub fn tag(&self) -> &'static str {
        match self {
            ProjRole::Query => "q",
            ProjRole::Value => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraTarget {
    pub layer: usize,
    pub role: ProjRole,
    /// r x d_in
    pub a: Matrix,
    /// d_out x r
    pub b: Matrix,
}

/// A low-rank delta attached to the base model's query and value
/// projections. `b` starts at zero, so a freshly created adapter is a
/// no-op. Each adapter owns its storage outright; no two adapters alias.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub id: String,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl LoraAdapter {
    /// Fresh adapter: `a` seeded from (config.seed, id), `b` all zeros.
    pub fn init(id: impl Into<String>, config: &ModelConfig) -> Self {
        let id = id.into();
        let mut rng = SplitMix64::new(config.seed).split("adapter").split(&id);
        let d = config.d_model;
        let r = config.lora_rank;
        let a_std = 1.0 / (r as f64).sqrt();
        let mut targets = Vec::with_capacity(config.n_layers * 2);
        for layer in 0..config.n_layers {
            for role in [ProjRole::Query, ProjRole::Value] {
                targets.push(LoraTarget {
                    layer,
                    role,
                    a: Matrix::gaussian(r, d, a_std, &mut rng),
                    b: Matrix::zeros(d, r),
                });
            }
        }
        Self { id, rank: r, alpha: config.lora_alpha, targets }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn target(&self, layer: usize, role: ProjRole) -> Option<&LoraTarget> {
        self.targets.iter().find(|t| t.layer == layer && t.role == role)
    }

    pub fn is_finite(&self) -> bool {
        self.targets.iter().all(|t| t.a.is_finite() && t.b.is_finite())
    }

    /// Dense delta `scaling * B A` for one target.
    pub fn dense_delta(&self, layer: usize, role: ProjRole) -> Option<Matrix> {
        self.target(layer, role).map(|t| t.b.matmul(&t.a).scale(self.scaling()))
    }
}

/// Which adapters answer a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterSelection {
    None,
    Single(String),
    Averaged(Vec<String>),
}

impl AdapterSelection {
    pub fn adapter_ids(&self) -> Vec<String> {
        match self {
            AdapterSelection::None => Vec::new(),
            AdapterSelection::Single(id) => vec![id.clone()],
            AdapterSelection::Averaged(ids) => ids.clone(),
        }
    }
}

/// Adapters resolved against a store, each with a mixing weight.
/// `Single(a)` resolves to `[(a, 1.0)]`; `Averaged(list)` to `1/k` each.
pub type ActiveAdapters<'a> = Vec<(&'a LoraAdapter, f64)>;

const NORM_EPS: f64 = 1e-6;

fn rms_inv(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + NORM_EPS).sqrt()
}

pub(crate) fn rmsnorm_backward(dy: &[f64], x: &[f64], ri: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
    dy.iter()
        .zip(x)
        .map(|(dy_i, x_i)| ri * dy_i - (ri * ri * ri / n) * dot * x_i)
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Per-layer activations recorded during a cached forward pass; consumed by
/// the backward pass in `grad`.
pub(crate) struct LayerCache {
    pub x_in: Vec<Vec<f64>>,
    pub rms_a: Vec<f64>,
    pub xn_attn: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// A·xn per position for the training adapter's query/value targets.
    pub lora_q_u: Vec<Vec<f64>>,
    pub lora_v_u: Vec<Vec<f64>>,
    /// attention weights per head: aw[h][t] has t+1 entries.
    pub aw: Vec<Vec<Vec<f64>>>,
    pub x_mid: Vec<Vec<f64>>,
    pub rms_m: Vec<f64>,
    pub h1: Vec<Vec<f64>>,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub x_final: Vec<Vec<f64>>,
    pub rms_f: Vec<f64>,
    /// softmax probabilities per position.
    pub probs: Vec<Vec<f64>>,
}

fn check_tokens(base: &BaseWeights, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.len() > base.config.context_len {
        return Err(ModelError::SequenceTooLong(tokens.len(), base.config.context_len));
    }
    for &t in tokens {
        if t as usize >= base.config.vocab_size {
            return Err(ModelError::TokenOutOfRange(t, base.config.vocab_size));
        }
    }
    Ok(())
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn forward_impl(
    base: &BaseWeights,
    active: &ActiveAdapters,
    tokens: &[u32],
    want_cache: bool,
) -> Result<(Matrix, Option<ForwardCache>), ModelError> {
    check_tokens(base, tokens)?;
    let cfg = &base.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    if want_cache {
        debug_assert_eq!(active.len(), 1, "cached forward trains exactly one adapter");
    }

    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let e = base.embed.row(tokens[t] as usize);
            let p = base.pos.row(t);
            e.iter().zip(p).map(|(a, b)| a + b).collect()
        })
        .collect();

    let mut layer_caches = Vec::new();
    for (l, lw) in base.layers.iter().enumerate() {
        let x_in = x.clone();
        let rms_a: Vec<f64> = x_in.iter().map(|xi| rms_inv(xi)).collect();
        let xn_attn: Vec<Vec<f64>> = x_in
            .iter()
            .zip(&rms_a)
            .map(|(xi, ri)| xi.iter().map(|v| v * ri).collect())
            .collect();

        let mut q: Vec<Vec<f64>> = xn_attn.iter().map(|xn| lw.wq.matvec(xn)).collect();
        let k: Vec<Vec<f64>> = xn_attn.iter().map(|xn| lw.wk.matvec(xn)).collect();
        let mut v: Vec<Vec<f64>> = xn_attn.iter().map(|xn| lw.wv.matvec(xn)).collect();

        // Adapter deltas are accumulated per position and added to the
        // projection once, so averaging k copies of the same adapter is
        // bit-identical to activating it alone.
        let mut lora_q_u: Vec<Vec<f64>> = Vec::new();
        let mut lora_v_u: Vec<Vec<f64>> = Vec::new();
        for (role, proj) in [(ProjRole::Query, &mut q), (ProjRole::Value, &mut v)] {
            let mut deltas: Option<Vec<Vec<f64>>> = None;
            for (adapter, weight) in active {
                let Some(tg) = adapter.target(l, role) else { continue };
                let s = adapter.scaling() * weight;
                let acc = deltas.get_or_insert_with(|| vec![vec![0.0; d]; t_len]);
                for (t, xn) in xn_attn.iter().enumerate() {
                    let u = tg.a.matvec(xn);
                    let dv = tg.b.matvec(&u);
                    for (a, b) in acc[t].iter_mut().zip(&dv) {
                        *a += s * b;
                    }
                    if want_cache {
                        match role {
                            ProjRole::Query => lora_q_u.push(u),
                            ProjRole::Value => lora_v_u.push(u),
                        }
                    }
                }
            }
            if let Some(acc) = deltas {
                for (p, a) in proj.iter_mut().zip(acc) {
                    for (pi, ai) in p.iter_mut().zip(a) {
                        *pi += ai;
                    }
                }
            }
        }

        // causal attention
        let mut aw: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_len); n_heads];
        let mut ho: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for h in 0..n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            for t in 0..t_len {
                let qh = &q[t][lo..hi];
                let mut logits: Vec<f64> = (0..=t)
                    .map(|u| {
                        let kh = &k[u][lo..hi];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for w in logits.iter_mut() {
                    *w = (*w - m).exp();
                    sum += *w;
                }
                for w in logits.iter_mut() {
                    *w /= sum;
                }
                for (u, w) in logits.iter().enumerate() {
                    let vh = &v[u][lo..hi];
                    for (i, vv) in vh.iter().enumerate() {
                        ho[t][lo + i] += w * vv;
                    }
                }
                aw[h].push(logits);
            }
        }

        let attn_out: Vec<Vec<f64>> = ho.iter().map(|h| lw.wo.matvec(h)).collect();
        let x_mid: Vec<Vec<f64>> = x_in
            .iter()
            .zip(&attn_out)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();

        let rms_m: Vec<f64> = x_mid.iter().map(|xi| rms_inv(xi)).collect();
        let xn_mlp: Vec<Vec<f64>> = x_mid
            .iter()
            .zip(&rms_m)
            .map(|(xi, ri)| xi.iter().map(|v| v * ri).collect())
            .collect();
        let h1: Vec<Vec<f64>> = xn_mlp.iter().map(|xn| lw.w1.matvec(xn)).collect();
        let ha: Vec<Vec<f64>> = h1.iter().map(|row| row.iter().map(|&v| gelu(v)).collect()).collect();
        let mlp_out: Vec<Vec<f64>> = ha.iter().map(|h| lw.w2.matvec(h)).collect();
        let x_out: Vec<Vec<f64>> = x_mid
            .iter()
            .zip(&mlp_out)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();

        if want_cache {
            layer_caches.push(LayerCache {
                x_in,
                rms_a,
                xn_attn,
                q,
                k,
                v,
                lora_q_u,
                lora_v_u,
                aw,
                x_mid,
                rms_m,
                h1,
            });
        }
        x = x_out;
    }

    let x_final = x;
    let rms_f: Vec<f64> = x_final.iter().map(|xi| rms_inv(xi)).collect();
    let xn_final: Vec<Vec<f64>> = x_final
        .iter()
        .zip(&rms_f)
        .map(|(xi, ri)| xi.iter().map(|v| v * ri).collect())
        .collect();

    let vcount = cfg.vocab_size;
    let mut logits = Matrix::zeros(t_len, vcount);
    for (t, xn) in xn_final.iter().enumerate() {
        let row = base.unembed.matvec(xn);
        logits.data[t * vcount..(t + 1) * vcount].copy_from_slice(&row);
    }

    let cache = if want_cache {
        let probs: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let lp = log_softmax(logits.row(t));
                lp.iter().map(|v| v.exp()).collect()
            })
            .collect();
        Some(ForwardCache { layers: layer_caches, x_final, rms_f, probs })
    } else {
        None
    };
    Ok((logits, cache))
}

/// Logits for every position of `tokens` under the given active adapters.
pub fn forward(
    base: &BaseWeights,
    active: &ActiveAdapters,
    tokens: &[u32],
) -> Result<Matrix, ModelError> {
    forward_impl(base, active, tokens, false).map(|(l, _)| l)
}

/// Resolves a selection against a lookup function.
pub fn resolve_selection<'a, F>(
    selection: &AdapterSelection,
    lookup: F,
) -> Result<ActiveAdapters<'a>, ModelError>
where
    F: Fn(&str) -> Option<&'a LoraAdapter>,
{
    match selection {
        AdapterSelection::None => Ok(Vec::new()),
        AdapterSelection::Single(id) => {
            let a = lookup(id)
                .ok_or_else(|| ModelError::AdapterMismatch(format!("unknown adapter {id}")))?;
            Ok(vec![(a, 1.0)])
        }
        AdapterSelection::Averaged(ids) => {
            if ids.is_empty() {
                return Err(ModelError::AdapterMismatch("averaged selection is empty".into()));
            }
            let w = 1.0 / ids.len() as f64;
            ids.iter()
                .map(|id| {
                    lookup(id)
                        .map(|a| (a, w))
                        .ok_or_else(|| ModelError::AdapterMismatch(format!("unknown adapter {id}")))
                })
                .collect()
        }
    }
}

/// One scored position: realized log-probability plus the mean and standard
/// deviation of next-token log-probabilities under the model's distribution
/// at that context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbStat {
    pub logprob: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatWeighting {
    /// mu/sigma are the probability-weighted expectation and spread.
    Probability,
    /// plain arithmetic mean over the vocabulary.
    Uniform,
}

/// Scores `text_ids` autoregressively: position t is predicted from
/// `[bos] ++ prefix_ids ++ text_ids[..t]`. Only text positions are returned;
/// the prefix conditions the model but is not scored.
pub fn token_logprobs_with_prefix(
    base: &BaseWeights,
    active: &ActiveAdapters,
    bos_id: u32,
    prefix_ids: &[u32],
    text_ids: &[u32],
    weighting: StatWeighting,
) -> Result<Vec<LogProbStat>, ModelError> {
    if text_ids.len() < 2 {
        return Err(ModelError::TextTooShort(text_ids.len()));
    }
    let mut seq = Vec::with_capacity(1 + prefix_ids.len() + text_ids.len());
    seq.push(bos_id);
    seq.extend_from_slice(prefix_ids);
    seq.extend_from_slice(text_ids);
    let logits = forward(base, active, &seq)?;
    let offset = 1 + prefix_ids.len();
    let mut out = Vec::with_capacity(text_ids.len());
    for (i, &tok) in text_ids.iter().enumerate() {
        // distribution after consuming seq[..offset+i]
        let lp = log_softmax(logits.row(offset + i - 1));
        let (mu, sigma) = match weighting {
            StatWeighting::Probability => {
                let mut mu = 0.0;
                for &l in &lp {
                    mu += l.exp() * l;
                }
                let mut var = 0.0;
                for &l in &lp {
                    var += l.exp() * (l - mu) * (l - mu);
                }
                (mu, var.max(0.0).sqrt())
            }
            StatWeighting::Uniform => {
                let n = lp.len() as f64;
                let mu = lp.iter().sum::<f64>() / n;
                let var = lp.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
                (mu, var.max(0.0).sqrt())
            }
        };
        out.push(LogProbStat { logprob: lp[tok as usize], mu, sigma });
    }
    Ok(out)
}

pub fn token_logprobs(
    base: &BaseWeights,
    active: &ActiveAdapters,
    bos_id: u32,
    text_ids: &[u32],
) -> Result<Vec<LogProbStat>, ModelError> {
    token_logprobs_with_prefix(base, active, bos_id, &[], text_ids, StatWeighting::Probability)
}

/// Greedy decoding. Stops at `eos`, at `max_new_tokens`, or when the context
/// window fills. Ties resolve to the lowest token id.
pub fn generate_ids(
    base: &BaseWeights,
    active: &ActiveAdapters,
    bos_id: u32,
    eos_id: u32,
    prompt_ids: &[u32],
    max_new_tokens: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut seq = Vec::with_capacity(1 + prompt_ids.len() + max_new_tokens);
    seq.push(bos_id);
    seq.extend_from_slice(prompt_ids);
    check_tokens(base, &seq)?;
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        if seq.len() >= base.config.context_len {
            break;
        }
        let logits = forward(base, active, &seq)?;
        let row = logits.row(seq.len() - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let next = best as u32;
        if next == eos_id {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Greedy decoding straight to text.
pub fn generate(
    base: &BaseWeights,
    active: &ActiveAdapters,
    tokenizer: &Tokenizer,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String, ModelError> {
    let prompt_ids = tokenizer.tokenize(prompt);
    let ids = generate_ids(
        base,
        active,
        tokenizer.bos_id(),
        tokenizer.eos_id(),
        &prompt_ids,
        max_new_tokens,
    )?;
    Ok(tokenizer.detokenize(&ids).expect("generated ids are in range"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 1,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config(11);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_split_and_validation() {
        let mut cfg = ModelConfig::desk_default(100, 0);
        assert_eq!(cfg.head_dim(), 16);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn fresh_adapter_is_a_noop() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        let adapter = LoraAdapter::init("a", &cfg);
        let tokens = [0u32, 4, 7, 2, 9];
        let plain = forward(&base, &Vec::new(), &tokens).unwrap();
        let with = forward(&base, &vec![(&adapter, 1.0)], &tokens).unwrap();
        let max_diff = plain
            .data
            .iter()
            .zip(&with.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn averaged_duplicate_equals_single() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        let mut adapter = LoraAdapter::init("a", &cfg);
        // give b some mass so the adapter actually does something
        let mut rng = SplitMix64::new(5);
        for t in adapter.targets.iter_mut() {
            t.b = Matrix::gaussian(t.b.rows, t.b.cols, 0.3, &mut rng);
        }
        let tokens = [1u32, 5, 3, 8];
        let single = forward(&base, &vec![(&adapter, 1.0)], &tokens).unwrap();
        let avg = forward(&base, &vec![(&adapter, 0.5), (&adapter, 0.5)], &tokens).unwrap();
        assert_eq!(single.data, avg.data);
    }

    #[test]
    fn averaged_pair_matches_dense_oracle() {
        let cfg = tiny_config(13);
        let base = init_model(&cfg).unwrap();
        let mut rng = SplitMix64::new(6);
        let mut a1 = LoraAdapter::init("a1", &cfg);
        let mut a2 = LoraAdapter::init("a2", &cfg);
        for t in a1.targets.iter_mut().chain(a2.targets.iter_mut()) {
            t.b = Matrix::gaussian(t.b.rows, t.b.cols, 0.2, &mut rng);
        }
        let tokens = [2u32, 6, 1, 9, 4];
        let got = forward(&base, &vec![(&a1, 0.5), (&a2, 0.5)], &tokens).unwrap();

        // oracle: fold the averaged dense deltas into the base projections
        let mut dense = init_model(&cfg).unwrap();
        for (l, lw) in dense.layers.iter_mut().enumerate() {
            for (role, m) in [(ProjRole::Query, &mut lw.wq), (ProjRole::Value, &mut lw.wv)] {
                let d1 = a1.dense_delta(l, role).unwrap();
                let d2 = a2.dense_delta(l, role).unwrap();
                m.add_assign_scaled(&d1, 0.5);
                m.add_assign_scaled(&d2, 0.5);
            }
        }
        let want = forward(&dense, &Vec::new(), &tokens).unwrap();
        let max_diff = got
            .data
            .iter()
            .zip(&want.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = tiny_config(17);
        let base = init_model(&cfg).unwrap();
        let tokens = [0u32, 3, 11, 16, 8, 2];
        let logits = forward(&base, &Vec::new(), &tokens).unwrap();
        for t in 0..tokens.len() {
            let lp = log_softmax(logits.row(t));
            let sum: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        assert!(matches!(
            forward(&base, &Vec::new(), &[0, 11]),
            Err(ModelError::TokenOutOfRange(11, 11))
        ));
    }

    #[test]
    fn sequence_longer_than_context_is_an_error() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        let toks = vec![1u32; 17];
        assert!(matches!(
            forward(&base, &Vec::new(), &toks),
            Err(ModelError::SequenceTooLong(17, 16))
        ));
    }

    #[test]
    fn uniform_model_logprob_stats() {
        // zero weights -> logits all zero -> exactly uniform distribution
        let cfg = tiny_config(11);
        let mut base = init_model(&cfg).unwrap();
        base.embed = Matrix::zeros(11, 16);
        base.pos = Matrix::zeros(16, 16);
        base.unembed = Matrix::zeros(11, 16);
        let stats = token_logprobs(&base, &Vec::new(), 0, &[4, 7, 2]).unwrap();
        let expect = -(11f64).ln();
        for s in stats {
            assert!((s.logprob - expect).abs() < 1e-12);
            assert!((s.mu - expect).abs() < 1e-12);
            assert!(s.sigma.abs() < 1e-9);
        }
    }

    #[test]
    fn logprob_stats_match_bruteforce() {
        let cfg = tiny_config(13);
        let base = init_model(&cfg).unwrap();
        let text = [5u32, 2, 9, 1];
        let stats = token_logprobs(&base, &Vec::new(), 0, &text).unwrap();
        let mut seq = vec![0u32];
        seq.extend_from_slice(&text);
        let logits = forward(&base, &Vec::new(), &seq).unwrap();
        for (i, s) in stats.iter().enumerate() {
            let lp = log_softmax(logits.row(i));
            let mut mu = 0.0;
            for &l in &lp {
                mu += l.exp() * l;
            }
            let mut var = 0.0;
            for &l in &lp {
                var += l.exp() * (l - mu) * (l - mu);
            }
            assert!((s.mu - mu).abs() < 1e-9);
            assert!((s.sigma - var.sqrt()).abs() < 1e-9);
            assert!((s.logprob - lp[text[i] as usize]).abs() < 1e-9);
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_text_is_an_error() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        assert!(matches!(
            token_logprobs(&base, &Vec::new(), 0, &[4]),
            Err(ModelError::TextTooShort(1))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_respects_budget() {
        let cfg = tiny_config(11);
        let base = init_model(&cfg).unwrap();
        let a = generate_ids(&base, &Vec::new(), 0, 1, &[4, 7], 0).unwrap();
        assert!(a.is_empty());
        let b = generate_ids(&base, &Vec::new(), 0, 1, &[4, 7], 5).unwrap();
        let c = generate_ids(&base, &Vec::new(), 0, 1, &[4, 7], 5).unwrap();
        assert_eq!(b, c);
        assert!(b.len() <= 5);
    }
}

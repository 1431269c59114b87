//! Adapter training: Adam with decoupled weight decay, linear warmup, fixed
//! batch order per seed.

use serde::{Deserialize, Serialize};

use crate::grad::{loss_and_grads_weighted, LoraGrads, TrainExample};
use crate::model::{BaseWeights, LoraAdapter, ModelError};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Loss weight for prompt-region tokens; answer tokens always weigh 1.
    pub prompt_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 1,
            learning_rate: 1e-2,
            weight_decay: 0.1,
            warmup_steps: 10,
            prompt_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ModelError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_weight) {
            return Err(ModelError::InvalidConfig("prompt_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: Vec<(Matrix, Matrix)>,
    v: Vec<(Matrix, Matrix)>,
    step: usize,
}

impl AdamState {
    fn new(adapter: &LoraAdapter) -> Self {
        let zeros = |a: &LoraAdapter| {
            a.targets
                .iter()
                .map(|t| (Matrix::zeros(t.a.rows, t.a.cols), Matrix::zeros(t.b.rows, t.b.cols)))
                .collect::<Vec<_>>()
        };
        Self { m: zeros(adapter), v: zeros(adapter), step: 0 }
    }

    /// One AdamW update. Warmup scales the rate linearly over the first
    /// `warmup_steps` updates, then it stays constant.
    fn apply(&mut self, adapter: &mut LoraAdapter, grads: &LoraGrads, cfg: &TrainConfig) {
        self.step += 1;
        let warm = if cfg.warmup_steps > 0 {
            (self.step as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = cfg.learning_rate * warm;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (ti, target) in adapter.targets.iter_mut().enumerate() {
            let (ga, gb) = &grads.targets[ti];
            let (ma, mb) = &mut self.m[ti];
            let (va, vb) = &mut self.v[ti];
            update_matrix(&mut target.a, ga, ma, va, lr, bc1, bc2, cfg.weight_decay);
            update_matrix(&mut target.b, gb, mb, vb, lr, bc1, bc2, cfg.weight_decay);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_matrix(
    w: &mut Matrix,
    g: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    lr: f64,
    bc1: f64,
    bc2: f64,
    weight_decay: f64,
) {
    for i in 0..w.data.len() {
        let gi = g.data[i];
        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
        let mhat = m.data[i] / bc1;
        let vhat = v.data[i] / bc2;
        w.data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * w.data[i]);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_history.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    /// Mean over the first/last `window` recorded losses; used to check that
    /// training made progress without being fooled by step-to-step noise.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        if self.loss_history.is_empty() {
            return None;
        }
        let w = window.min(self.loss_history.len()).max(1);
        let head = self.loss_history[..w].iter().sum::<f64>() / w as f64;
        let tail = self.loss_history[self.loss_history.len() - w..].iter().sum::<f64>() / w as f64;
        Some((head, tail))
    }
}

/// Trains one adapter on the given examples. Only the adapter mutates;
/// batch order is a pure function of (config.seed, example count).
pub fn train_adapter(
    base: &BaseWeights,
    examples: &[TrainExample],
    adapter: &mut LoraAdapter,
    config: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut adam = AdamState::new(adapter);
    let mut report = TrainReport::default();
    let shuffle_root = SplitMix64::new(config.seed).split("batch-order");
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        shuffle_root.split(&format!("epoch{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) =
                loss_and_grads_weighted(base, adapter, &batch, config.prompt_weight)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step: report.steps, loss });
            }
            adam.apply(adapter, &grads, config);
            report.steps += 1;
            report.loss_history.push(loss);
        }
    }
    if !adapter.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: report.steps, loss: f64::NAN });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (BaseWeights, Vec<TrainExample>) {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 4,
        };
        let base = init_model(&cfg).unwrap();
        // little language: token 2k is always followed by 2k+1
        let seqs: Vec<TrainExample> = (0..30)
            .map(|i| {
                let a = 4 + 2 * (i % 4) as u32;
                TrainExample::unmasked(vec![0, a, a + 1, a, a + 1])
            })
            .collect();
        (base, seqs)
    }

    #[test]
    fn zero_learning_rate_leaves_adapter_bit_identical() {
        let (base, seqs) = setup();
        let mut adapter = LoraAdapter::init("z", &base.config);
        let before = adapter.clone();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..TrainConfig::default() };
        train_adapter(&base, &seqs, &mut adapter, &cfg).unwrap();
        assert_eq!(adapter, before);
    }

    #[test]
    fn training_reduces_loss() {
        let (base, seqs) = setup();
        let mut adapter = LoraAdapter::init("t", &base.config);
        let cfg = TrainConfig { epochs: 30, batch_size: 8, ..TrainConfig::default() };
        let report = train_adapter(&base, &seqs, &mut adapter, &cfg).unwrap();
        let (head, tail) = report.smoothed_endpoints(5).unwrap();
        assert!(tail < head, "no progress: head {head} tail {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let (base, seqs) = setup();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let mut a1 = LoraAdapter::init("s", &base.config);
        let mut a2 = LoraAdapter::init("s", &base.config);
        let r1 = train_adapter(&base, &seqs, &mut a1, &cfg).unwrap();
        let r2 = train_adapter(&base, &seqs, &mut a2, &cfg).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(r1.loss_history, r2.loss_history);
    }

    #[test]
    fn base_weights_frozen_through_training() {
        let (base, seqs) = setup();
        let before = base.clone();
        let mut adapter = LoraAdapter::init("f", &base.config);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        train_adapter(&base, &seqs, &mut adapter, &cfg).unwrap();
        assert_eq!(base, before);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (base, _) = setup();
        let mut adapter = LoraAdapter::init("e", &base.config);
        assert!(train_adapter(&base, &[], &mut adapter, &TrainConfig::default()).is_err());
    }
}

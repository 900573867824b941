use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad_with_dropout, sequence_loss, sequence_loss_and_grad, DecoderError, DecoderExample, DecoderParams, Result};

/// Reduce-on-plateau settings (minimisation, relative threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 2,
            threshold: 1e-4,
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Records an epoch loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.config.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub grad_clip_norm: f64,
    pub scheduler: PlateauConfig,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 16,
            dropout: 0.1,
            grad_clip_norm: 5.0,
            scheduler: PlateauConfig::default(),
            epochs: 20,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Settings for from-scratch toy models.
    pub fn toy() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DecoderError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub curve: Vec<EpochStats>,
}

struct Adam {
    m: DecoderParams,
    v: DecoderParams,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &DecoderParams, config: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    fn step(&mut self, params: &mut DecoderParams, grads: &DecoderParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Teacher-forced training. Deterministic for a fixed seed.
pub fn train(params: DecoderParams, dataset: &[DecoderExample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(params, dataset, config, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; `Break` stops early.
pub fn train_with(
    mut params: DecoderParams,
    dataset: &[DecoderExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &DecoderParams) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&params, config);
    let mut scheduler = PlateauScheduler::new(config.scheduler, config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = scheduler.learning_rate();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let ex = &dataset[i];
                let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut rng));
                let (loss, g) = loss_and_grad_with_dropout(&params, ex, dropout)?;
                if !loss.is_finite() {
                    return Err(DecoderError::NonFiniteLoss {
                        epoch,
                        example: ex.id.clone(),
                    });
                }
                total += loss;
                grads.add_scaled(&g, 1.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.squared_norm().sqrt();
            if norm > config.grad_clip_norm {
                grads.scale(config.grad_clip_norm / norm);
            }
            adam.step(&mut params, &grads, lr);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / dataset.len() as f64,
            learning_rate: lr,
        };
        curve.push(stats);
        scheduler.step(stats.mean_loss);
        if on_epoch(&stats, &params).is_break() {
            break;
        }
    }
    Ok(TrainOutcome { params, curve })
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: &'static str,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Central-difference check of every parameter entry against the analytic
/// gradient of [`super::sequence_loss`].
pub fn gradient_check(params: &DecoderParams, example: &DecoderExample, epsilon: f64) -> Result<GradCheckReport> {
    let (_, analytic) = sequence_loss_and_grad(params, example)?;
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    for (b, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.blocks()[b].1[i];
            probe.blocks_mut()[b].1[i] = original + epsilon;
            let up = sequence_loss(&probe, example)?;
            probe.blocks_mut()[b].1[i] = original - epsilon;
            let down = sequence_loss(&probe, example)?;
            probe.blocks_mut()[b].1[i] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport {
            name,
            entries: grad.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport { epsilon, blocks })
}

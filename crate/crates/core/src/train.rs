//! Minibatch training with Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::diff::{backward_sparse, LossConfig};
use crate::error::{Error, Result};
use crate::fmt::f64_17;
use crate::metrics::{evaluate, Metrics};
use crate::model::{forward, Gradients, HyperParams, Mode, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(params: &ModelParams) -> Self {
        AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, moments: &mut AdamMoments, cfg: &AdamConfig) {
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let g = grads.arrays();
    let m = moments.m.arrays_mut();
    let v = moments.v.arrays_mut();
    for (((p, (_, g)), m), v) in params.arrays_mut().into_iter().zip(g).zip(m).zip(v) {
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Draws batches without replacement, reshuffling at each epoch boundary.
/// The last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        EpochSampler {
            order,
            cursor: 0,
            epoch: 0,
            rng,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_batches: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation metrics are recorded every this many batches and after
    /// the last one.
    pub eval_every: usize,
    pub hyper: HyperParams,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(hyper: HyperParams) -> Self {
        TrainConfig {
            batch_size: 100,
            num_batches: 300,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 10,
            loss: LossConfig::for_classes(hyper.classes),
            hyper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.loss.validate(&self.hyper)?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub batch: usize,
    /// Mean training loss over the batches since the previous row.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters at the history row with the best validation AUC (binary)
    /// or accuracy (multiclass); the final parameters without validation.
    pub best_params: ModelParams,
    pub best_batch: usize,
    pub history: Vec<HistoryRow>,
    pub final_validation: Option<Metrics>,
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(
    train_docs: &[Document],
    validation: Option<&[Document]>,
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.hyper, vocab_size, cfg.seed)?;
    train_from(params, train_docs, validation, cfg)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    train_docs: &[Document],
    validation: Option<&[Document]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hp = &cfg.hyper;
    params.check_shapes(hp, params.vocab_size())?;
    if cfg.num_batches > 0 && train_docs.is_empty() {
        return Err(Error::InvalidConfig("no training documents".into()));
    }
    let mut sampler = EpochSampler::new(train_docs.len(), cfg.seed.wrapping_add(1));
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut moments = AdamMoments::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut window_loss = 0.0;
    let mut window_batches = 0usize;
    let mut last_validation = None;

    for b in 1..=cfg.num_batches {
        let batch = sampler.next_batch(cfg.batch_size);
        let seeds: Vec<u64> = batch.iter().map(|_| dropout_seeds.next_u64()).collect();
        let per_doc = batch
            .par_iter()
            .zip(&seeds)
            .map(|(&i, &s)| {
                let doc = &train_docs[i];
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let state = forward(doc, &params, hp, Mode::Train, &mut rng)?;
                backward_sparse(&state, &params, hp, doc.label, &cfg.loss)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0;
        for (l, g) in &per_doc {
            batch_loss += l;
            g.add_to(&mut grads, 1.0);
        }
        let n = batch.len() as f64;
        batch_loss /= n;
        grads.scale(1.0 / n);
        if !batch_loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                batch: b,
                loss: batch_loss,
            });
        }
        adam_step(&mut params, &grads, &mut moments, &cfg.adam);
        window_loss += batch_loss;
        window_batches += 1;

        if b % cfg.eval_every == 0 || b == cfg.num_batches {
            let metrics = match validation {
                Some(v) if !v.is_empty() => Some(evaluate(v, &params, hp, &cfg.loss)?),
                _ => None,
            };
            if let Some(m) = &metrics {
                let score = m.auc.unwrap_or(m.accuracy);
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, b, params.clone()));
                }
            }
            history.push(HistoryRow {
                batch: b,
                train_loss: window_loss / window_batches as f64,
                val_accuracy: metrics.as_ref().map(|m| m.accuracy),
                val_auc: metrics.as_ref().and_then(|m| m.auc),
            });
            window_loss = 0.0;
            window_batches = 0;
            last_validation = metrics;
        }
    }

    let (best_batch, best_params) = match best {
        Some((_, b, p)) => (b, p),
        None => (cfg.num_batches, params.clone()),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_batch,
        history,
        final_validation: last_validation,
    })
}

/// `batch,train_loss,val_accuracy,val_auc`; missing values are empty.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let opt = |x: Option<f64>| x.map(f64_17).unwrap_or_default();
    let mut out = String::from("batch,train_loss,val_accuracy,val_auc\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.batch,
            f64_17(r.train_loss),
            opt(r.val_accuracy),
            opt(r.val_auc)
        );
    }
    out
}

pub fn write_history(history: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn sampler_batches_and_reshuffles() {
        let mut s = EpochSampler::new(10, 3);
        let sizes: Vec<usize> = (0..3).map(|_| s.next_batch(4).len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(s.epoch(), 0);
        let mut s = EpochSampler::new(10, 3);
        let epoch: BTreeSet<usize> = (0..3).flat_map(|_| s.next_batch(4)).collect();
        assert_eq!(epoch, (0..10).collect());
        let first = s.next_batch(10);
        assert_eq!(s.epoch(), 1);
        assert_eq!(first.iter().copied().collect::<BTreeSet<_>>(), (0..10).collect());
        let mut a = EpochSampler::new(10, 9);
        let mut b = EpochSampler::new(10, 9);
        for _ in 0..7 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let hp = HyperParams::default();
        let mut p = ModelParams::init(&hp, 5, 1).unwrap();
        let before = p.clone();
        let mut m = AdamMoments::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut m, &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let hp = HyperParams::default();
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, -7.0] {
            let mut p = ModelParams::zeros(&hp, 1);
            let mut grads = p.zeros_like();
            grads.head_bias[0] = g;
            let mut m = AdamMoments::new(&p);
            adam_step(&mut p, &grads, &mut m, &cfg);
            // m̂ = g and v̂ = g² after one step.
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((p.head_bias[0] - expected).abs() < 1e-18, "{g}");
            assert!(m.v.arrays().iter().all(|(_, a)| a.iter().all(|&x| x >= 0.0)));
        }
    }

    #[test]
    fn zero_batches_returns_init() {
        let hp = HyperParams::default();
        let cfg = TrainConfig {
            num_batches: 0,
            seed: 5,
            ..TrainConfig::new(hp.clone())
        };
        let out = train(&[], None, 7, &cfg).unwrap();
        assert_eq!(out.final_params, ModelParams::init(&hp, 7, 5).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn history_csv_format() {
        let rows = vec![
            HistoryRow {
                batch: 10,
                train_loss: 0.5,
                val_accuracy: Some(0.75),
                val_auc: None,
            },
        ];
        assert_eq!(
            history_csv(&rows),
            "batch,train_loss,val_accuracy,val_auc\n10,5.0000000000000000e-1,7.5000000000000000e-1,\n"
        );
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = TrainConfig::new(HyperParams::default());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(HyperParams::default());
        cfg.adam.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }
}

//! Minibatch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::qa::{argmax, batch_loss, QaModel, QuestionRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::param::ParamStore;
use crate::sampler::FeatureVolume;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub volume: FeatureVolume,
    pub question: QuestionRecord,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of all steps spent warming up.
    pub warmup_fraction: f64,
    pub precision: Precision,
    /// Seeds shuffling and sparse clip placement.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.1,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub reg: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    optimizer: AdamW,
    schedule: Schedule,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// A trainer whose schedule spans `total_steps` updates.
    pub fn new(config: TrainConfig, store: &ParamStore, total_steps: usize) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(config.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, store),
            schedule: Schedule::with_warmup_fraction(total_steps, config.warmup_fraction),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.config.batch_size)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, model: &QaModel, store: &mut ParamStore, batch: &[&Example]) -> Result<StepMetrics> {
        let mut g = Graph::new(self.config.precision);
        let mut outputs = Vec::with_capacity(batch.len());
        let mut volumes = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for ex in batch {
            let vol = g.constant(ex.volume.tensor().clone());
            outputs.push(model.forward(&mut g, store, vol, &ex.question, &mut self.rng)?);
            volumes.push(vol);
            labels.push(ex.label);
        }
        let bl = batch_loss(&mut g, model, &outputs, &volumes, &labels)?;
        let loss = g.value(bl.loss).item()?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step, loss });
        }
        let grads = g.backward(bl.loss)?;
        let lr = self.config.optimizer.lr * self.schedule.factor(self.step);
        self.optimizer.step(store, &grads, lr, self.config.precision);
        let metrics = StepMetrics {
            step: self.step,
            loss,
            reg: bl.regularizer,
            accuracy: bl.correct as f64 / batch.len() as f64,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// One shuffled pass over `data`.
    pub fn train_epoch(
        &mut self,
        model: &QaModel,
        store: &mut ParamStore,
        data: &[Example],
    ) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(self.steps_per_epoch(data.len()));
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            out.push(self.train_step(model, store, &batch)?);
        }
        Ok(out)
    }
}

/// Trains for `config.epochs` epochs, calling `on_step` after every update.
pub fn train(
    model: &QaModel,
    store: &mut ParamStore,
    data: &[Example],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let per_epoch = data.len().div_ceil(config.batch_size.max(1));
    let mut trainer = Trainer::new(config.clone(), store, per_epoch * config.epochs)?;
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        for m in trainer.train_epoch(model, store, data)? {
            on_step(&m);
            curve.push(m);
        }
    }
    Ok(curve)
}

/// Predicted answer for every example.
pub fn predict(
    model: &QaModel,
    store: &ParamStore,
    data: &[Example],
    precision: Precision,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|ex| {
            let mut g = Graph::new(precision);
            let vol = g.constant(ex.volume.tensor().clone());
            let out = model.forward(&mut g, store, vol, &ex.question, &mut rng)?;
            Ok(argmax(g.value(out.logits).data()))
        })
        .collect()
}

/// Fraction of examples answered correctly.
pub fn evaluate(model: &QaModel, store: &ParamStore, data: &[Example], precision: Precision, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(model, store, data, precision, seed)?;
    let correct = preds.iter().zip(data).filter(|(p, ex)| **p == ex.label).count();
    Ok(correct as f64 / data.len() as f64)
}

//! Strategy comparisons on the synthetic task.
//!
//! For every seed the task is generated once and shared by all arms, so
//! arms are compared on identical data (paired by seed). Each trial builds
//! a fresh model from the seed, trains it, and records test accuracy and,
//! for the deformable strategy, the diversity of its sampled tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{generate_task, Dataset, SyntheticTaskConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::config::config_hash;
use crate::model::train::train;
use crate::model::{argmax, ModelConfig, QaModel, Strategy, TrainConfig};
use crate::param::ParamStore;
use crate::regularizer::{diversity_metrics, DiversityMetrics, RegConfig, RegKind};

/// One configuration under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub strategy: Strategy,
    pub num_clips: usize,
    pub regularizer: RegConfig,
}

impl Arm {
    pub fn dense(regularizer: RegConfig) -> Self {
        Self {
            name: format!("dense-{}", regularizer.kind),
            strategy: Strategy::DeformableDense,
            num_clips: 0,
            regularizer,
        }
    }

    pub fn sparse(num_clips: usize) -> Self {
        Self {
            name: format!("sparse-{num_clips}"),
            strategy: Strategy::SparseRandom,
            num_clips,
            regularizer: RegConfig::default(),
        }
    }

    pub fn uniform() -> Self {
        Self {
            name: "uniform".into(),
            strategy: Strategy::UniformDense,
            num_clips: 0,
            regularizer: RegConfig::default(),
        }
    }

    /// Parses `dense`, `dense-<reg>`, `sparse`, `sparse-<clips>` or
    /// `uniform`. Bare names take the regularizer and clip count of `base`.
    pub fn parse(spec: &str, base: &ModelConfig) -> Result<Self> {
        let spec = spec.trim().to_ascii_lowercase();
        let (head, tail) = match spec.split_once('-') {
            Some((h, t)) => (h, Some(t)),
            None => (spec.as_str(), None),
        };
        match (head, tail) {
            ("dense" | "deformable", None) => Ok(Self::dense(*base.regularizer())),
            ("dense" | "deformable", Some(kind)) => {
                let kind: RegKind = kind.parse()?;
                Ok(Self::dense(RegConfig {
                    kind,
                    ..*base.regularizer()
                }))
            }
            ("sparse", None) => Ok(Self::sparse(base.num_clips)),
            ("sparse", Some(n)) => {
                let n = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad clip count in arm `{spec}`")))?;
                Ok(Self::sparse(n))
            }
            ("uniform", None) => Ok(Self::uniform()),
            _ => Err(Error::Config(format!(
                "unknown arm `{spec}` (expected dense[-reg], sparse[-clips] or uniform)"
            ))),
        }
    }

    pub fn model_config(&self, base: &ModelConfig, data: &Dataset) -> ModelConfig {
        let mut m = base.clone();
        m.strategy = self.strategy;
        if self.strategy == Strategy::SparseRandom {
            m.num_clips = self.num_clips;
        }
        *m.regularizer_mut() = self.regularizer;
        m.num_classes = data.num_classes();
        m.vocab_size = data.vocabulary.len();
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

/// Weight of the soft-orthogonality term in the default sweep. Sampled
/// tokens leave a layer norm with squared norm about `d`, so the library
/// default of 0.01 outweighs the answer loss by orders of magnitude here;
/// 1e-7 keeps the term near 0.1 per batch at initialization.
pub const SWEEP_SO_LAMBDA: f64 = 1e-7;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = SyntheticTaskConfig::default();
        let mut model = ModelConfig::desk(task.num_archetypes, 1).with_d_model(task.channels);
        *model.regularizer_mut() = RegConfig {
            kind: RegKind::So,
            lambda: SWEEP_SO_LAMBDA,
            ..RegConfig::default()
        };
        let so = *model.regularizer();
        Self {
            arms: vec![
                Arm::dense(so),
                Arm::dense(RegConfig {
                    kind: RegKind::None,
                    ..so
                }),
                Arm::sparse(1),
                Arm::sparse(4),
            ],
            task,
            model,
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> u64 {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.model.d_model != self.task.channels {
            return Err(Error::Config(format!(
                "model hidden size {} must equal feature channels {}",
                self.model.d_model, self.task.channels
            )));
        }
        if self.arms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one arm and one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub arm: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub num_clips: usize,
    pub regularizer: RegKind,
    pub lambda: f64,
    pub test_accuracy: Option<f64>,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean over test items (deformable strategy only).
    pub diversity: Option<DiversityMetrics>,
    /// Transformer sequence length per pass on the first test item.
    pub sequence_lengths: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub completed: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_gram_offdiag: Option<f64>,
    pub mean_min_location_distance: Option<f64>,
}

/// Seed-paired comparison of two arms' test accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: String,
    pub b: String,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    pub mean_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub config_hash: u64,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub summaries: Vec<ArmSummary>,
    pub comparisons: Vec<PairedComparison>,
}

impl ExperimentReport {
    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    pub fn trial(&self, arm: &str, seed: u64) -> Option<&TrialRecord> {
        self.trials.iter().find(|t| t.arm == arm && t.seed == seed)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&PairedComparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }
}

struct Evaluation {
    accuracy: f64,
    diversity: Option<DiversityMetrics>,
    sequence_lengths: Vec<usize>,
}

fn evaluate_trial(
    model: &QaModel,
    store: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut correct = 0;
    let (mut gram, mut dist, mut n_div) = (0.0, 0.0, 0usize);
    let mut lengths = Vec::new();
    for (i, ex) in data.test.iter().enumerate() {
        let mut g = Graph::new(cfg.precision);
        let vol = g.constant(ex.volume.tensor().clone());
        let out = model.forward(&mut g, store, vol, &ex.question, &mut rng)?;
        if argmax(g.value(out.logits).data()) == ex.label {
            correct += 1;
        }
        if i == 0 {
            lengths = out.sequence_lengths.clone();
        }
        if let Some(s) = &out.sampled {
            let set = s.token_set(&g);
            if set.num_tokens() >= 2 {
                let m = diversity_metrics(&set)?;
                gram += m.gram_offdiag;
                dist += m.min_location_distance;
                n_div += 1;
            }
        }
    }
    if data.test.is_empty() {
        return Err(Error::InvalidInput("empty test split".into()));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.test.len() as f64,
        diversity: (n_div > 0).then(|| DiversityMetrics {
            gram_offdiag: gram / n_div as f64,
            min_location_distance: dist / n_div as f64,
        }),
        sequence_lengths: lengths,
    })
}

/// Trains and evaluates one arm on one seed's data. Failures (including
/// divergence) are recorded in the trial rather than returned.
pub fn run_trial(cfg: &ExperimentConfig, arm: &Arm, seed: u64, data: &Dataset) -> TrialRecord {
    let mut record = TrialRecord {
        arm: arm.name.clone(),
        seed,
        strategy: arm.strategy,
        num_clips: arm.num_clips,
        regularizer: arm.regularizer.kind,
        lambda: arm.regularizer.lambda,
        test_accuracy: None,
        epoch_loss: Vec::new(),
        diversity: None,
        sequence_lengths: Vec::new(),
        error: None,
    };
    let result = (|| -> Result<()> {
        let model_cfg = arm.model_config(&cfg.model, data);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = QaModel::new(&mut store, model_cfg, &mut rng)?;
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let per_epoch = data.train.len().div_ceil(train_cfg.batch_size.max(1));
        let curve = train(&model, &mut store, &data.train, &train_cfg, |_| {})?;
        record.epoch_loss = curve
            .chunks(per_epoch.max(1))
            .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
            .collect();
        let ev = evaluate_trial(&model, &store, data, &train_cfg, seed)?;
        record.test_accuracy = Some(ev.accuracy);
        record.diversity = ev.diversity;
        record.sequence_lengths = ev.sequence_lengths;
        Ok(())
    })();
    if let Err(e) = result {
        record.error = Some(e.to_string());
    }
    record
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Builds summaries and seed-paired comparisons from trial records.
pub fn summarize(config: ExperimentConfig, trials: Vec<TrialRecord>) -> ExperimentReport {
    let summaries = config
        .arms
        .iter()
        .map(|arm| {
            let mine: Vec<&TrialRecord> = trials.iter().filter(|t| t.arm == arm.name).collect();
            ArmSummary {
                arm: arm.name.clone(),
                completed: mine.iter().filter(|t| t.test_accuracy.is_some()).count(),
                mean_accuracy: mean(mine.iter().filter_map(|t| t.test_accuracy)),
                mean_gram_offdiag: mean(mine.iter().filter_map(|t| t.diversity.map(|d| d.gram_offdiag))),
                mean_min_location_distance: mean(
                    mine.iter().filter_map(|t| t.diversity.map(|d| d.min_location_distance)),
                ),
            }
        })
        .collect();
    let mut comparisons = Vec::new();
    for (i, a) in config.arms.iter().enumerate() {
        for b in &config.arms[i + 1..] {
            let mut c = PairedComparison {
                a: a.name.clone(),
                b: b.name.clone(),
                a_wins: 0,
                b_wins: 0,
                ties: 0,
                mean_difference: None,
            };
            let mut diffs = Vec::new();
            for &seed in &config.seeds {
                let acc = |arm: &str| {
                    trials
                        .iter()
                        .find(|t| t.arm == arm && t.seed == seed)
                        .and_then(|t| t.test_accuracy)
                };
                if let (Some(x), Some(y)) = (acc(&a.name), acc(&b.name)) {
                    match x.partial_cmp(&y) {
                        Some(std::cmp::Ordering::Greater) => c.a_wins += 1,
                        Some(std::cmp::Ordering::Less) => c.b_wins += 1,
                        _ => c.ties += 1,
                    }
                    diffs.push(x - y);
                }
            }
            c.mean_difference = mean(diffs.into_iter());
            comparisons.push(c);
        }
    }
    ExperimentReport {
        version: 1,
        config_hash: config.hash(),
        config,
        trials,
        summaries,
        comparisons,
    }
}

/// Runs every (seed, arm) trial. Arms of one seed run in parallel on the
/// shared dataset; seeds run one after another to bound memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_| {})
}

/// Like [`run_experiment`], calling `on_trial` as each trial finishes.
pub fn run_experiment_with(cfg: &ExperimentConfig, on_trial: impl Fn(&TrialRecord) + Sync) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut trials = Vec::with_capacity(cfg.seeds.len() * cfg.arms.len());
    for &seed in &cfg.seeds {
        let task = SyntheticTaskConfig {
            seed,
            ..cfg.task.clone()
        };
        let data = generate_task(&task)?;
        let batch: Vec<TrialRecord> = cfg
            .arms
            .par_iter()
            .map(|arm| {
                let t = run_trial(cfg, arm, seed, &data);
                on_trial(&t);
                t
            })
            .collect();
        trials.extend(batch);
    }
    Ok(summarize(cfg.clone(), trials))
}

//! Plain-text `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment. Keys are grouped by prefix
//! (`task.`, `model.`, `sampler.`, `reg.`, `dep.`, `train.`, `sweep.`);
//! [`KEYS`] lists them all. Later lines (and command-line overrides, which
//! go through the same [`apply`]) win.

use std::fmt::Write as _;
use std::str::FromStr;

use super::experiment::{Arm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{ClipPooling, Strategy};
use crate::tensor::Precision;

pub const KEYS: &[&str] = &[
    "task.frames",
    "task.height",
    "task.width",
    "task.channels",
    "task.archetypes",
    "task.events",
    "task.event_frames",
    "task.patch",
    "task.amplitude",
    "task.noise",
    "task.templates",
    "task.train_size",
    "task.test_size",
    "task.seed",
    "model.d_model",
    "model.layers",
    "model.heads",
    "model.ffn_dim",
    "model.strategy",
    "model.clips",
    "model.clip_frames",
    "model.clip_pooling",
    "model.global_context",
    "model.max_question_len",
    "sampler.queries",
    "sampler.heads",
    "sampler.points",
    "sampler.layers",
    "sampler.ffn_dim",
    "sampler.offset_radius",
    "sampler.offset_lr_mult",
    "reg.kind",
    "reg.lambda",
    "reg.epsilon",
    "reg.tau",
    "reg.inclusive",
    "dep.mode",
    "dep.layers",
    "dep.heads",
    "dep.ffn_dim",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.warmup",
    "train.precision",
    "train.seed",
    "sweep.seeds",
    "sweep.arms",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

pub fn parse_precision(value: &str) -> Result<Precision> {
    match value.to_ascii_lowercase().as_str() {
        "f32" | "32" => Ok(Precision::F32),
        "f64" | "64" => Ok(Precision::F64),
        other => Err(Error::Config(format!(
            "unknown precision `{other}` (expected f32 or f64)"
        ))),
    }
}

/// `3` means seeds `0..3`; `1,5,9` lists them.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    if value.contains(',') {
        value.split(',').map(|s| num("sweep.seeds", s.trim())).collect()
    } else {
        let n: u64 = num("sweep.seeds", value)?;
        Ok((0..n).collect())
    }
}

/// Sets one key.
pub fn apply(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    let t = &mut cfg.task;
    let m = &mut cfg.model;
    match key.trim() {
        "task.frames" => t.frames = num(key, v)?,
        "task.height" => t.height = num(key, v)?,
        "task.width" => t.width = num(key, v)?,
        "task.channels" => {
            t.channels = num(key, v)?;
            *m = m.clone().with_d_model(t.channels);
        }
        "task.archetypes" => t.num_archetypes = num(key, v)?,
        "task.events" => t.events_per_video = num(key, v)?,
        "task.event_frames" => t.event_frames = num(key, v)?,
        "task.patch" => t.patch = num(key, v)?,
        "task.amplitude" => t.amplitude = num(key, v)?,
        "task.noise" => t.noise = num(key, v)?,
        "task.templates" => {
            t.templates = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<_>>()?
        }
        "task.train_size" => t.train_size = num(key, v)?,
        "task.test_size" => t.test_size = num(key, v)?,
        "task.seed" => t.seed = num(key, v)?,
        "model.d_model" => {
            let d = num(key, v)?;
            *m = m.clone().with_d_model(d);
            t.channels = d;
        }
        "model.layers" => m.num_layers = num(key, v)?,
        "model.heads" => m.num_heads = num(key, v)?,
        "model.ffn_dim" => m.ffn_dim = num(key, v)?,
        "model.strategy" => m.strategy = v.parse::<Strategy>()?,
        "model.clips" => m.num_clips = num(key, v)?,
        "model.clip_frames" => m.clip_frames = num(key, v)?,
        "model.clip_pooling" => {
            m.clip_pooling = match v.to_ascii_lowercase().as_str() {
                "flatten" => ClipPooling::Flatten,
                "temporal-mean" | "mean" => ClipPooling::TemporalMean,
                other => return Err(Error::Config(format!("unknown clip pooling `{other}`"))),
            }
        }
        "model.global_context" => m.global_context = boolean(key, v)?,
        "model.max_question_len" => m.max_question_len = num(key, v)?,
        "sampler.queries" => m.sampler.num_queries = num(key, v)?,
        "sampler.heads" => m.sampler.num_heads = num(key, v)?,
        "sampler.points" => m.sampler.num_points = num(key, v)?,
        "sampler.layers" => m.sampler.num_layers = num(key, v)?,
        "sampler.ffn_dim" => m.sampler.ffn_dim = num(key, v)?,
        "sampler.offset_radius" => m.sampler.offset_radius = num(key, v)?,
        "sampler.offset_lr_mult" => m.sampler.offset_lr_mult = num(key, v)?,
        "reg.kind" => m.regularizer_mut().kind = v.parse()?,
        "reg.lambda" => m.regularizer_mut().lambda = num(key, v)?,
        "reg.epsilon" => m.regularizer_mut().epsilon = num(key, v)?,
        "reg.tau" => m.regularizer_mut().tau = num(key, v)?,
        "reg.inclusive" => m.regularizer_mut().inclusive_denominator = boolean(key, v)?,
        "dep.mode" => m.dependency.mode = v.parse()?,
        "dep.layers" => m.dependency.num_layers = num(key, v)?,
        "dep.heads" => m.dependency.num_heads = num(key, v)?,
        "dep.ffn_dim" => m.dependency.ffn_dim = num(key, v)?,
        "train.epochs" => cfg.train.epochs = num(key, v)?,
        "train.batch_size" => cfg.train.batch_size = num(key, v)?,
        "train.lr" => cfg.train.optimizer.lr = num(key, v)?,
        "train.weight_decay" => cfg.train.optimizer.weight_decay = num(key, v)?,
        "train.warmup" => cfg.train.warmup_fraction = num(key, v)?,
        "train.precision" => cfg.train.precision = parse_precision(v)?,
        "train.seed" => cfg.train.seed = num(key, v)?,
        "sweep.seeds" => cfg.seeds = parse_seeds(v)?,
        "sweep.arms" => {
            cfg.arms = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| Arm::parse(s, &cfg.model))
                .collect::<Result<_>>()?
        }
        other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
    }
    Ok(())
}

/// `(line number, key, value)` for every setting in `text`.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies every line of `text` on top of `base`.
pub fn apply_text(base: &mut ExperimentConfig, text: &str) -> Result<()> {
    for (line, k, v) in parse_lines(text)? {
        apply(base, &k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    }
    Ok(())
}

/// Renders every key with its current value.
pub fn to_text(cfg: &ExperimentConfig) -> String {
    let (t, m, tr) = (&cfg.task, &cfg.model, &cfg.train);
    let r = m.regularizer();
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("task.frames", t.frames.to_string());
    put("task.height", t.height.to_string());
    put("task.width", t.width.to_string());
    put("task.channels", t.channels.to_string());
    put("task.archetypes", t.num_archetypes.to_string());
    put("task.events", t.events_per_video.to_string());
    put("task.event_frames", t.event_frames.to_string());
    put("task.patch", t.patch.to_string());
    put("task.amplitude", t.amplitude.to_string());
    put("task.noise", t.noise.to_string());
    put(
        "task.templates",
        t.templates
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    put("task.train_size", t.train_size.to_string());
    put("task.test_size", t.test_size.to_string());
    put("task.seed", t.seed.to_string());
    put("model.layers", m.num_layers.to_string());
    put("model.heads", m.num_heads.to_string());
    put("model.ffn_dim", m.ffn_dim.to_string());
    put("model.strategy", m.strategy.to_string());
    put("model.clips", m.num_clips.to_string());
    put("model.clip_frames", m.clip_frames.to_string());
    put(
        "model.clip_pooling",
        match m.clip_pooling {
            ClipPooling::Flatten => "flatten".into(),
            ClipPooling::TemporalMean => "temporal-mean".into(),
        },
    );
    put("model.global_context", m.global_context.to_string());
    put("model.max_question_len", m.max_question_len.to_string());
    put("sampler.queries", m.sampler.num_queries.to_string());
    put("sampler.heads", m.sampler.num_heads.to_string());
    put("sampler.points", m.sampler.num_points.to_string());
    put("sampler.layers", m.sampler.num_layers.to_string());
    put("sampler.ffn_dim", m.sampler.ffn_dim.to_string());
    put("sampler.offset_radius", m.sampler.offset_radius.to_string());
    put("sampler.offset_lr_mult", m.sampler.offset_lr_mult.to_string());
    put("reg.kind", r.kind.to_string());
    put("reg.lambda", r.lambda.to_string());
    put("reg.epsilon", r.epsilon.to_string());
    put("reg.tau", r.tau.to_string());
    put("reg.inclusive", r.inclusive_denominator.to_string());
    put(
        "dep.mode",
        match m.dependency.mode {
            crate::dependency::DepMode::Gold => "gold".into(),
            crate::dependency::DepMode::Learned => "learned".into(),
        },
    );
    put("dep.layers", m.dependency.num_layers.to_string());
    put("dep.heads", m.dependency.num_heads.to_string());
    put("dep.ffn_dim", m.dependency.ffn_dim.to_string());
    put("train.epochs", tr.epochs.to_string());
    put("train.batch_size", tr.batch_size.to_string());
    put("train.lr", tr.optimizer.lr.to_string());
    put("train.weight_decay", tr.optimizer.weight_decay.to_string());
    put("train.warmup", tr.warmup_fraction.to_string());
    put(
        "train.precision",
        match tr.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        },
    );
    put("train.seed", tr.seed.to_string());
    put(
        "sweep.seeds",
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    put(
        "sweep.arms",
        cfg.arms.iter().map(|a| a.name.clone()).collect::<Vec<_>>().join(","),
    );
    s
}

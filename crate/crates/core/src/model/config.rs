use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dependency::DepConfig;
use crate::error::{Error, Result};
use crate::regularizer::RegConfig;
use crate::sampler::SamplerConfig;

/// How visual tokens are chosen from the feature volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Question-conditioned deformable sampling plus per-frame global context.
    #[default]
    DeformableDense,
    /// A few random 2-frame clips, each run separately, logits averaged.
    SparseRandom,
    /// Every cell of the volume becomes a token.
    UniformDense,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" | "deformable" | "deformable-dense" | "dsr" => Ok(Self::DeformableDense),
            "sparse" | "sparse-random" => Ok(Self::SparseRandom),
            "uniform" | "uniform-dense" | "baseline" => Ok(Self::UniformDense),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected dense, sparse or uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DeformableDense => "deformable-dense",
            Self::SparseRandom => "sparse-random",
            Self::UniformDense => "uniform-dense",
        })
    }
}

/// How the two frames of a sparse clip become tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipPooling {
    /// Every cell of every clip frame is a token.
    #[default]
    Flatten,
    /// Frames of the clip are averaged first, leaving `h·w` tokens.
    TemporalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Answer vocabulary size `C`.
    pub num_classes: usize,
    /// Question (subword) vocabulary size.
    pub vocab_size: usize,
    pub max_question_len: usize,
    pub strategy: Strategy,
    pub num_clips: usize,
    pub clip_frames: usize,
    pub clip_pooling: ClipPooling,
    /// Whether the deformable strategy also feeds per-frame global tokens.
    pub global_context: bool,
    pub sampler: SamplerConfig,
    pub dependency: DepConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(6, 64)
    }
}

impl ModelConfig {
    /// The small configuration used for tests and experiments.
    pub fn desk(num_classes: usize, vocab_size: usize) -> Self {
        let d = 64;
        Self {
            d_model: d,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            num_classes,
            vocab_size,
            max_question_len: 100,
            strategy: Strategy::DeformableDense,
            num_clips: 4,
            clip_frames: 2,
            clip_pooling: ClipPooling::Flatten,
            global_context: true,
            sampler: SamplerConfig {
                d_model: d,
                ffn_dim: 2 * d,
                ..SamplerConfig::default()
            },
            dependency: DepConfig {
                d_model: d,
                num_heads: 4,
                num_layers: 2,
                ffn_dim: 2 * d,
                ..DepConfig::default()
            },
        }
    }

    /// Transformer sizes of the full-scale model: 12 layers, 12 heads,
    /// hidden 768, intermediate 3072.
    pub fn full_scale(num_classes: usize, vocab_size: usize) -> Self {
        let d = 768;
        Self {
            d_model: d,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            sampler: SamplerConfig {
                d_model: d,
                ffn_dim: 3072,
                ..SamplerConfig::default()
            },
            dependency: DepConfig {
                d_model: d,
                num_heads: 12,
                num_layers: 2,
                ffn_dim: 3072,
                ..DepConfig::default()
            },
            ..Self::desk(num_classes, vocab_size)
        }
    }

    /// The smallest configuration that exercises every component: hidden
    /// size 8, one layer everywhere, two heads, two queries with two points
    /// per head. Used by gradient checks.
    pub fn tiny(num_classes: usize, vocab_size: usize) -> Self {
        let d = 8;
        Self {
            d_model: d,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_question_len: 8,
            num_clips: 1,
            sampler: SamplerConfig {
                num_queries: 2,
                num_heads: 2,
                num_points: 2,
                num_layers: 1,
                d_model: d,
                ffn_dim: 16,
                ..SamplerConfig::default()
            },
            dependency: DepConfig {
                d_model: d,
                num_heads: 2,
                num_layers: 1,
                ffn_dim: 16,
                ..DepConfig::default()
            },
            ..Self::desk(num_classes, vocab_size)
        }
    }

    /// Sets the hidden size everywhere it appears.
    pub fn with_d_model(mut self, d: usize) -> Self {
        self.d_model = d;
        self.sampler.d_model = d;
        self.dependency.d_model = d;
        self
    }

    pub fn regularizer(&self) -> &RegConfig {
        &self.sampler.regularizer
    }

    pub fn regularizer_mut(&mut self) -> &mut RegConfig {
        &mut self.sampler.regularizer
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || self.num_layers == 0 || self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "transformer needs >= 1 layer and a head count dividing d (d={d}, heads={})",
                self.num_heads
            )));
        }
        if self.sampler.d_model != d || self.dependency.d_model != d {
            return Err(Error::Config(format!(
                "hidden sizes disagree: model {d}, sampler {}, question encoder {}",
                self.sampler.d_model, self.dependency.d_model
            )));
        }
        if self.num_classes == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "answer and question vocabularies must be non-empty".into(),
            ));
        }
        if self.max_question_len == 0 {
            return Err(Error::Config("max question length must be >= 1".into()));
        }
        if self.strategy == Strategy::SparseRandom && (self.num_clips == 0 || self.clip_frames == 0) {
            return Err(Error::Config("sparse sampling needs >= 1 clip of >= 1 frame".into()));
        }
        self.sampler.validate()?;
        self.dependency.validate()
    }

    /// Stable 64-bit digest of the configuration.
    pub fn hash(&self) -> u64 {
        config_hash(self)
    }
}

/// First 8 bytes (little endian) of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

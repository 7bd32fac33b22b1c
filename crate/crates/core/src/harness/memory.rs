//! Analytic transformer memory model.
//!
//! Attention memory grows with the square of the sequence length:
//!
//! ```text
//! baseline (all tokens):  (T·H·W + L_t)²
//! sparse (N_c clips):     N_c · (H·W + L_t)²
//! deformable sampling:    (N_q + T + L_t)²
//! ```
//!
//! A single budget constant, fixed so that the baseline fits exactly 60
//! frames at `H = W = 7`, `L_t = 100`, turns costs into a predicted
//! maximum number of frames for each strategy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostStrategy {
    Baseline,
    Sparse,
    Dsr,
}

impl std::str::FromStr for CostStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "uniform" => Ok(Self::Baseline),
            "sparse" => Ok(Self::Sparse),
            "dsr" | "dense" | "deformable" => Ok(Self::Dsr),
            other => Err(Error::Config(format!(
                "unknown memory-model strategy `{other}` (expected baseline, sparse or dsr)"
            ))),
        }
    }
}

impl std::fmt::Display for CostStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Sparse => "sparse",
            Self::Dsr => "dsr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub strategy: CostStrategy,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub question_len: usize,
    pub queries: usize,
    /// Number of sparse clips; `None` means `T/2` (one clip per two frames).
    pub clips: Option<usize>,
}

impl CostModelInput {
    /// The reference setting: 7×7 grid, 100 question tokens, 25 queries.
    pub fn reference(strategy: CostStrategy, frames: usize) -> Self {
        Self {
            strategy,
            frames,
            height: 7,
            width: 7,
            question_len: 100,
            queries: 25,
            clips: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.question_len == 0 {
            return Err(Error::Config("memory model inputs must be positive".into()));
        }
        if self.strategy == CostStrategy::Dsr && self.queries == 0 {
            return Err(Error::Config("deformable sampling needs >= 1 query".into()));
        }
        if self.clips == Some(0) {
            return Err(Error::Config("sparse sampling needs >= 1 clip".into()));
        }
        Ok(())
    }

    /// Length of one transformer sequence.
    pub fn sequence_len(&self) -> usize {
        let hw = self.height * self.width;
        match self.strategy {
            CostStrategy::Baseline => self.frames * hw + self.question_len,
            CostStrategy::Sparse => hw + self.question_len,
            CostStrategy::Dsr => self.queries + self.frames + self.question_len,
        }
    }

    pub fn num_clips(&self) -> f64 {
        self.clips.map_or(self.frames as f64 / 2.0, |c| c as f64)
    }

    /// Quadratic cost units.
    pub fn cost(&self) -> f64 {
        let s = self.sequence_len() as f64;
        match self.strategy {
            CostStrategy::Sparse => self.num_clips() * s * s,
            _ => s * s,
        }
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub strategy: CostStrategy,
    pub frames: usize,
    pub sequence_len: usize,
    pub cost: f64,
    /// Largest frame count whose cost fits the budget.
    pub max_frames: usize,
}

/// Budget at which the baseline fits exactly `frames` frames.
pub fn calibrate_budget(frames: usize, height: usize, width: usize, question_len: usize) -> f64 {
    CostModelInput {
        strategy: CostStrategy::Baseline,
        frames,
        height,
        width,
        question_len,
        queries: 0,
        clips: None,
    }
    .cost()
}

/// Budget calibrated on the reference setting (baseline = 60 frames).
pub fn reference_budget() -> f64 {
    calibrate_budget(60, 7, 7, 100)
}

/// Largest `T ≥ 0` with `cost(T) ≤ budget`; cost is increasing in `T`.
pub fn max_frames(input: &CostModelInput, budget: f64) -> usize {
    if input.with_frames(1).cost() > budget {
        return 0;
    }
    let (mut lo, mut hi) = (1usize, 2usize);
    while input.with_frames(hi).cost() <= budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if input.with_frames(mid).cost() <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn memory_cost(input: &CostModelInput, budget: f64) -> Result<CostEstimate> {
    input.validate()?;
    Ok(CostEstimate {
        strategy: input.strategy,
        frames: input.frames,
        sequence_len: input.sequence_len(),
        cost: input.cost(),
        max_frames: max_frames(input, budget),
    })
}

/// The three strategies at `frames` in the reference setting.
pub fn reference_table(frames: usize) -> Result<Vec<CostEstimate>> {
    let budget = reference_budget();
    [CostStrategy::Baseline, CostStrategy::Sparse, CostStrategy::Dsr]
        .into_iter()
        .map(|s| memory_cost(&CostModelInput::reference(s, frames), budget))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_arithmetic() {
        let base = CostModelInput::reference(CostStrategy::Baseline, 32);
        assert_eq!(base.sequence_len(), 1668);
        assert_eq!(base.cost(), 1668.0 * 1668.0);
        let dsr = CostModelInput::reference(CostStrategy::Dsr, 32);
        assert_eq!(dsr.sequence_len(), 157);
        assert_eq!(dsr.cost(), 157.0 * 157.0);
        let sparse = CostModelInput::reference(CostStrategy::Sparse, 32);
        assert_eq!(sparse.cost(), 16.0 * 149.0 * 149.0);
    }

    #[test]
    fn calibrated_max_frames() {
        let t = reference_table(32).unwrap();
        assert_eq!(t[0].max_frames, 60);
        assert_eq!(t[1].max_frames, 832);
        assert_eq!(t[2].max_frames, 2915);
    }

    #[test]
    fn zero_inputs_rejected() {
        let mut i = CostModelInput::reference(CostStrategy::Dsr, 0);
        assert!(memory_cost(&i, 1.0).is_err());
        i.frames = 4;
        i.queries = 0;
        assert!(memory_cost(&i, 1.0).is_err());
    }
}

//! Cross-modal transformer, training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod qa;
pub mod train;

pub use config::{ClipPooling, ModelConfig, Strategy};
pub use qa::{argmax, total_loss, AnswerHead, QaModel, QaOutput, QuestionRecord};
pub use train::{Example, StepMetrics, TrainConfig, Trainer};

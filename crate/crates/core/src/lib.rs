//! Multi-task split learning: a producer trains a shared encoder and per-task
//! metamorphosis modules (optionally under differential privacy) and sells
//! features to consumers that hold the task heads.
//!
//! The most used types are re-exported at the crate root.

pub mod attacks;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod privacy;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use attacks::{evaluate_interchange, reconstruction_attack, AttackConfig, InterchangeReport, ReconstructionReport};
pub use data::{Dataset, Labels, SyntheticSceneConfig};
pub use error::{Error, Result};
pub use model::{BackboneSpec, Crossing, DType, FeatureTensor, MetamorphConfig, TaskKind};
pub use nn::AdamWConfig;
pub use objectives::{LossWeights, SimilarityMeasure};
pub use privacy::{compute_epsilon, DpConfig, PrivacyLedger};
pub use runtime::{RttRecord, SessionConfig, SplitMessage};
pub use tensor::Tensor;
pub use trainer::{
    train, Checkpoint, DpSettings, MultiTaskModel, RegimeKind, TaskSpec, TrainConfig, TrainOutcome, TrainStatus,
    TrainingRegime,
};

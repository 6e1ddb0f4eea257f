//! Transformer encoder for lane-change intention classification, trained
//! with a small reverse-mode gradient engine over `ndarray` matrices.

pub mod checkpoint;
pub mod tape;
pub mod train;
pub mod transformer;

pub use tape::{Float, Graph, Var};
pub use train::{evaluate, train, Evaluation, TrainConfig, TrainOutcome};
pub use transformer::{ModelConfig, ModelError, ModelParams, Pooling};

pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;

//! Deep clustering with sample-view and class-view contrastive losses.
//!
//! A small MLP with a main and an over-clustering softmax head is trained so that the
//! cluster assignments of a batch and of its augmented twin agree, contrasting both
//! samples (rows) and classes (columns) with InfoNCE over cosine similarities.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod trainer;

pub use error::{DcdcError, Result};
pub use losses::{LossBreakdown, Temperature};
pub use matrix::{Matrix, ProbBatch};
pub use model::{Model, ModelConfig};
pub use trainer::{evaluate, export_affinity, train, TrainConfig, TrainHistory};

//! Natural language person retrieval: given an image's region proposals, a
//! text description, and categorical attributes, score every proposal and
//! return the best-matching person box.
//!
//! The pipeline is built from scratch on a small reverse-mode autodiff engine:
//! bidirectional LSTM text encoders with word attention, a Gaussian proposal
//! attention map over a global feature grid, spatial box features, and an
//! element-wise fusion classifier trained with sigmoid cross-entropy.

pub mod attributes;
pub mod autodiff;
pub mod boxes;
pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod text;
pub mod train;
pub mod visual;

pub use attributes::{AttributeCategory, AttributeSet, AttributeVotes};
pub use autodiff::{grad_check, Tape, Tensor, TensorId};
pub use boxes::BBox;
pub use dataset::{Dataset, PersonAnnotation, Scene, TrainingTuple};
pub use eval::EvalReport;
pub use model::ModelParams;
pub use train::TrainConfig;

//! Synthetic scenes, dataset IO, training, evaluation and the `slpt` CLI
//! built on `slpt-core`.

pub mod cli;
pub mod config;
pub mod eval;
pub mod io;
pub mod scene;
pub mod train;

pub use config::{Primitive, SceneConfig, TrainingConfig};
pub use io::Dataset;

//! Synthetic multi-task experiments built on the library: data, model,
//! optimizer, training loop, checkpoints, and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod run;
pub mod train;

pub use config::Config;
pub use data::{Batch, Suite, TaskKind};
pub use model::Model;
pub use train::Trainer;

//! Hybrid convolution / shifted-window attention segmentation network with
//! its loss, metrics and a synthetic-data training harness.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod global;
pub mod image_io;
pub mod local;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ppa;
pub mod protocol;
pub mod train;

pub use config::{ModelConfig, Switches};
pub use error::{Error, Result};
pub use model::{param_count, HiPerformer};

//! Federated learning with dual-side low-rank compression.
//!
//! Clients train an MLP locally with mini-batch SGD and upload weights
//! truncated by an energy-based SVD rule; the server averages the uploads,
//! truncates the average again and broadcasts it. A FedAvg baseline,
//! communication and MAC accounting, and convergence diagnostics are
//! included.

pub mod compression;
pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use compression::{
    compress_model, energy_rank, lr_compress, CompressedLayer, CompressedModel, FactorPair,
};
pub use data::Dataset;
pub use error::{Error, Result};
pub use federation::{run_training, Mode, TrainConfig};
pub use linalg::{svd, Matrix, Svd};
pub use metrics::{MetricsLog, RoundRecord};
pub use nn::{LrSchedule, Mlp};

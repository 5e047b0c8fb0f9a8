//! Federated-learning simulation workbench.
//!
//! Simulates parameter-server training rounds over partitioned devices with
//! three local update rules: a clipped, EMA-smoothed, diagonal-curvature-
//! preconditioned second-order method (`fed-sophia`), plain local SGD
//! (`fedavg`), and a Richardson-iteration approximate Newton baseline
//! (`done`). Every run carries a per-device energy ledger (computation plus
//! Shannon-rate transmission costs) and is a deterministic function of its
//! config and master seed.
//!
//! The `fedsophia` binary exposes the `run`, `sweep`, `quadratic-demo`, and
//! `gnb-check` subcommands; see the crate README for the config format.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod models;
pub mod optimizers;
pub mod seeding;
pub mod telemetry;

pub use error::{Error, Result};
pub use experiment::{run_experiment, run_experiment_with, ExperimentConfig, ExperimentOutcome};
pub use linalg::{DenseMatrix, ParamVector};
pub use models::{Batch, LogitModel, MlpSpec};

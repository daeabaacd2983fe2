//! Scenario orchestration.
//!
//! A [`ScenarioConfig`] determines a run completely. [`run_scenario`]
//! executes paired runs over identical data and seeds (no attack, attacked
//! without defence, attacked with defence) and condenses them into
//! [`RunMetrics`]. [`run_matrix`] repeats that over a
//! parameter grid.

mod config;
mod engine;
mod metrics;
mod sweep;

use thiserror::Error;

pub use config::{
    DatasetSpec, OutputConfig, ScenarioConfig, ShamirConfig, ThresholdMode, FULL_SCALE_CLIENTS,
};
pub use engine::{
    run_scenario, run_scenario_timed, simulate, Environment, RunMode, RunOutcome, ShareDrillFile,
    ESCROW_FILE, HISTORY_FILE, SHARES_FILE,
};
pub use metrics::{
    emit_metrics, EpochMetrics, RunMetrics, Timings, EPOCH_CSV, SCHEMA_VERSION, SUMMARY_JSON,
    TIMINGS_JSON,
};
pub use sweep::{apply_cell, run_matrix, sweep_csv, CellResult, Grid, SWEEP_CSV};

use crate::adversary::AdversaryError;
use crate::detector::DetectorError;
use crate::learning::LearningError;
use crate::protocol::ProtocolError;
use crate::recovery::RecoveryError;
use crate::vault::VaultError;

/// A failure inside one epoch.
#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario setup failed: {0}")]
    Setup(#[source] StepError),
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: u32,
        #[source]
        source: StepError,
    },
    #[error("writing output: {0}")]
    Output(String),
    #[error("sweep grid: {0}")]
    Grid(String),
}

impl SimError {
    /// Configuration problems are detected before any work is done.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::Grid(_))
    }
}

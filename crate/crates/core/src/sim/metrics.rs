use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::protocol::ClientId;

/// Bumped whenever a field of the summary or a CSV column changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const EPOCH_CSV: &str = "epochs.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMINGS_JSON: &str = "timings.json";

/// One row of the per-epoch table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    /// Test accuracy of the global model at the end of the epoch.
    pub acc: f64,
    pub accepted_groups: usize,
    pub rejected_groups: usize,
    /// Clients evicted in this epoch.
    pub evictions: usize,
    /// Clients not evicted at the end of the epoch.
    pub active_clients: usize,
    /// Clients left out of grouping this epoch.
    pub excluded_clients: usize,
}

/// Everything a scenario produces that is fully determined by its config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub seed: u64,
    pub num_client: usize,
    /// Defended run.
    pub epochs: Vec<EpochMetrics>,
    pub acc_no_attack: f64,
    pub acc_attacked: f64,
    pub acc_defended: f64,
    /// Detected malicious / actual malicious; 1 when there are none.
    pub acc_loc: f64,
    /// Evicted honest / honest.
    pub rate_false: f64,
    pub malicious: Vec<ClientId>,
    pub detected: Vec<ClientId>,
    pub surviving: Vec<ClientId>,
    pub false_positives: Vec<ClientId>,
    pub eviction_epochs: BTreeMap<ClientId, u32>,
    /// Epochs elapsed until the last malicious client was evicted, or
    /// `epoch_global` when some survived.
    pub epochs_to_last_eviction: u32,
    /// Final cumulative scores of the defended run.
    pub ledger: BTreeMap<ClientId, i64>,
    /// `(epoch, group)` sums discarded during unlearning for lack of evidence.
    pub dropped_groups: Vec<(u32, u32)>,
    pub no_attack_curve: Vec<f64>,
    pub attacked_curve: Vec<f64>,
}

impl RunMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Output(e.to_string()))
    }

    pub fn epochs_csv(&self) -> Result<Vec<u8>, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "acc",
            "accepted_groups",
            "rejected_groups",
            "evictions",
            "active_clients",
        ])
        .map_err(|e| SimError::Output(e.to_string()))?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.acc.to_string(),
                e.accepted_groups.to_string(),
                e.rejected_groups.to_string(),
                e.evictions.to_string(),
                e.active_clients.to_string(),
            ])
            .map_err(|e| SimError::Output(e.to_string()))?;
        }
        w.into_inner().map_err(|e| SimError::Output(e.to_string()))
    }
}

/// Wall-clock measurements; kept apart from [`RunMetrics`] because they
/// differ between otherwise identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phase_seconds: BTreeMap<String, f64>,
    /// Median seconds per escrow encryption.
    pub t_enc: Option<f64>,
    /// Median seconds per quorum decryption.
    pub t_dec: Option<f64>,
    /// Median seconds per client key-share generation.
    pub t_gks: Option<f64>,
}

#[derive(Debug, Default)]
pub(crate) struct TimingLog {
    pub phases: BTreeMap<&'static str, Duration>,
    pub enc: Vec<Duration>,
    pub dec: Vec<Duration>,
    pub gks: Vec<Duration>,
}

fn median(samples: &mut [Duration]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_unstable();
    let n = samples.len();
    let mid = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    Some(mid.as_secs_f64())
}

impl TimingLog {
    pub fn add_phase(&mut self, name: &'static str, d: Duration) {
        *self.phases.entry(name).or_default() += d;
    }

    pub fn finish(mut self) -> Timings {
        Timings {
            phase_seconds: self
                .phases
                .iter()
                .map(|(k, v)| (k.to_string(), v.as_secs_f64()))
                .collect(),
            t_enc: median(&mut self.enc),
            t_dec: median(&mut self.dec),
            t_gks: median(&mut self.gks),
        }
    }
}

/// Writes `epochs.csv`, `summary.json` and, when given, `timings.json` into
/// `dir`. Returns the paths written.
pub fn emit_metrics(
    metrics: &RunMetrics,
    timings: Option<&Timings>,
    dir: &Path,
) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(|e| SimError::Output(format!("{}: {e}", dir.display())))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf, SimError> {
        let path = dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| SimError::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    let mut out = vec![
        write(EPOCH_CSV, &metrics.epochs_csv()?)?,
        write(SUMMARY_JSON, metrics.to_json().as_bytes())?,
    ];
    if let Some(t) = timings {
        out.push(write(
            TIMINGS_JSON,
            serde_json::to_string_pretty(t)
                .expect("timings serialize")
                .as_bytes(),
        )?);
    }
    Ok(out)
}

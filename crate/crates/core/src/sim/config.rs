use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::adversary::AdversaryKind;
use crate::learning::{Architecture, BlobSpec, PartitionSpec, TrainParams};
use crate::vault::{PrimeField, ThresholdPolicy, DEFAULT_PRIME};

/// Client count restored by `--paper-shape`.
pub const FULL_SCALE_CLIENTS: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic Gaussian blobs; every split is drawn from the same centres.
    Blobs {
        n_features: usize,
        n_classes: usize,
        separation: f64,
        noise: f64,
    },
    /// A small-image text file, shuffled and cut into validation, test and
    /// training parts.
    File { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            n_features: 100,
            n_classes: 10,
            separation: 0.5,
            noise: 1.0,
        }
    }
}

/// How the configured `thre_eva` becomes the eviction bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Bound is `-|thre_eva|`.
    #[default]
    Negative,
    /// Bound is `thre_eva` as written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShamirConfig {
    /// Shares needed to recover a secret; defaults to 60% of the clients.
    pub threshold: Option<usize>,
    pub prime: u64,
}

impl Default for ShamirConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            prime: DEFAULT_PRIME,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for metrics and escrow files; nothing is written when unset.
    pub dir: Option<PathBuf>,
    /// Also persist the escrow store, share drill file and update history.
    pub escrow_files: bool,
}

/// Everything that determines a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_client: usize,
    pub rate_iid: f64,
    pub malicious_fraction: f64,
    pub tau: f64,
    pub thre_eva: i64,
    pub thre_eva_mode: ThresholdMode,
    pub epoch_global: u32,
    pub epoch_local: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub samples_per_client: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Half-width of the uniform perturbation masks.
    pub epsilon_amplitude: f64,
    /// Split former members of rejected groups across triples next epoch.
    pub scatter_groups: bool,
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub adversary: AdversaryKind,
    /// Per-client unlearning weights keyed by client number; default 1.
    pub unlearn_weights: std::collections::BTreeMap<u32, f64>,
    pub shamir: ShamirConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_client: 30,
            rate_iid: 0.5,
            malicious_fraction: 0.25,
            tau: 0.01,
            thre_eva: 6,
            thre_eva_mode: ThresholdMode::Negative,
            epoch_global: 30,
            epoch_local: 1,
            batch_size: 25,
            lr: 0.2,
            samples_per_client: 100,
            validation_size: 500,
            test_size: 2000,
            epsilon_amplitude: 1.0,
            scatter_groups: false,
            dataset: DatasetSpec::default(),
            model: Architecture::LogisticRegression,
            adversary: AdversaryKind::RandomUpdate { sigma: 1.0 },
            unlearn_weights: Default::default(),
            shamir: ShamirConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let config: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Restores the full client count.
    pub fn full_scale(mut self) -> Self {
        self.num_client = FULL_SCALE_CLIENTS;
        self
    }

    /// Eviction happens when a cumulative score is strictly below this.
    pub fn eviction_bound(&self) -> i64 {
        match self.thre_eva_mode {
            ThresholdMode::Negative => -self.thre_eva.abs(),
            ThresholdMode::Literal => self.thre_eva,
        }
    }

    /// `round(fraction * m)`, halves away from zero.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.num_client as f64).round() as usize
    }

    pub fn shamir_policy(&self) -> Result<ThresholdPolicy, SimError> {
        let m = self.num_client;
        let t = self.shamir.threshold.unwrap_or_else(|| {
            ((0.6 * m as f64).round() as usize).clamp(1, m.saturating_sub(1).max(1))
        });
        ThresholdPolicy::new(m, t).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epoch_local,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            n_clients: self.num_client,
            rate_iid: self.rate_iid,
            seed,
        }
    }

    pub fn blob_spec(&self) -> Option<BlobSpec> {
        match self.dataset {
            DatasetSpec::Blobs {
                n_features,
                n_classes,
                separation,
                noise,
            } => Some(BlobSpec {
                n_features,
                n_classes,
                separation,
                noise,
            }),
            DatasetSpec::File { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.num_client < 3 {
            return fail(format!("num_client must be >= 3, got {}", self.num_client));
        }
        if !(0.0..=0.5).contains(&self.malicious_fraction) {
            return fail(format!(
                "malicious_fraction {} outside [0, 0.5]",
                self.malicious_fraction
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.epoch_global == 0 {
            return fail("epoch_global must be >= 1".into());
        }
        if self.samples_per_client == 0 || self.validation_size == 0 || self.test_size == 0 {
            return fail("samples_per_client, validation_size and test_size must be >= 1".into());
        }
        if !(self.epsilon_amplitude >= 0.0 && self.epsilon_amplitude.is_finite()) {
            return fail(format!(
                "epsilon_amplitude must be >= 0, got {}",
                self.epsilon_amplitude
            ));
        }
        if let Some(w) = self.unlearn_weights.values().find(|w| !w.is_finite()) {
            return fail(format!("unlearn weight {w} is not finite"));
        }
        if let DatasetSpec::Blobs {
            n_features,
            n_classes,
            separation,
            noise,
        } = self.dataset
        {
            if n_features == 0
                || n_classes < 2
                || separation.is_nan()
                || separation <= 0.0
                || noise.is_nan()
                || noise <= 0.0
            {
                return fail("blob dataset needs n_features >= 1, n_classes >= 2 and positive separation and noise".into());
            }
        }
        if let Architecture::Mlp { hidden: 0 } = self.model {
            return fail("mlp needs hidden >= 1".into());
        }
        self.train_params()
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.partition_spec(0)
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.adversary
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        PrimeField::new(self.shamir.prime).map_err(|e| SimError::Config(e.to_string()))?;
        self.shamir_policy()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_through_toml() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        assert_eq!(
            ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap(),
            c
        );
        assert_eq!(c.eviction_bound(), -6);
        assert_eq!(c.malicious_count(), 8);
        assert_eq!(c.shamir_policy().unwrap().t, 18);
        assert_eq!(c.clone().full_scale().shamir_policy().unwrap().t, 90);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ScenarioConfig::from_toml_str(
            r#"
            seed = 9
            thre_eva = -3
            thre_eva_mode = "literal"
            [adversary]
            kind = "label_flip"
            [model]
            kind = "mlp"
            hidden = 8
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.eviction_bound(), -3);
        assert_eq!(
            c.adversary,
            AdversaryKind::LabelFlip {
                permutation_seed: None
            }
        );
        assert_eq!(c.model, Architecture::Mlp { hidden: 8 });
        assert_eq!(c.num_client, 30);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            "num_clients = 30",
            "malicious_fraction = 0.6",
            "tau = 0.0",
            "[shamir]\nprime = 100",
            "[shamir]\nthreshold = 30\nprime = 101",
            "[dataset]\nsource = \"blobs\"\nn_features = 3\nn_classes = 2\nseparation = 1.0\nnoise = 1.0\nextra = 1",
            "[adversary]\nkind = \"random_update\"\nsigma = -1.0",
        ] {
            assert!(matches!(ScenarioConfig::from_toml_str(bad), Err(SimError::Config(_))), "{bad}");
        }
    }
}

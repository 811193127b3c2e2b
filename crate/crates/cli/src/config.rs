//! Experiment configuration files.
//!
//! A config is a TOML document with the sections below. Unknown keys are
//! rejected.
//!
//! ```toml
//! [dataset]
//! source = { kind = "blobs" }      # or { kind = "csv", path = "d.csv", label_column = "label" }
//! n_samples = 300
//! n_features = 2
//! class_separation = 4.0
//! noise_sd = 1.0
//! seed = 0
//! split_fraction = 0.8
//! min_max_scale = false
//!
//! [model]
//! hidden = [64]
//!
//! [train]
//! epochs = 10          # E
//! lr = 1.0             # α
//! lr_decay = 0.1       # η, α_n = α / (1 + η n)
//! batch_size = 240     # b
//! clip = 0.5           # γ
//! shuffle_seed = 1
//! init_seed = 2
//!
//! [certify]
//! mode = "privacy"     # or "unlearning"
//! kset = [1, 2, 3, 4, 5, 8, 12, 16, 24, 32]
//! beta = 0.04          # optional; defaults to ε/(2 ln(2/δ)) for the first privacy ε
//!
//! [privacy]
//! epsilons = [0.1, 1.0, 10.0]
//! delta = 1e-5
//! n_draws = 1000
//! seed = 7
//!
//! [oracle]
//! random_trials = 200
//! adversarial_trials = 20
//! seed = 11
//! pool_scale = 3.0
//! ```

use std::path::Path;

use agt::certifier::DEFAULT_KSET;
use agt::datasets::{DataSource, DatasetSpec};
use agt::{Mode, TrainConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub certify: CertifyConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub mode: Mode,
    #[serde(default = "default_kset")]
    pub kset: Vec<usize>,
    pub beta: Option<f64>,
}

fn default_kset() -> Vec<usize> {
    DEFAULT_KSET.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.3, 1.0, 3.0, 10.0],
            delta: 1e-5,
            n_draws: 1000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub random_trials: usize,
    pub adversarial_trials: usize,
    pub seed: u64,
    /// Synthetic pool extremes sit at this multiple of the largest absolute
    /// training feature value.
    pub pool_scale: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            random_trials: 200,
            adversarial_trials: 20,
            seed: 11,
            pool_scale: 3.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative CSV paths are resolved against the config's directory.
        if let DataSource::Csv { path: data, .. } = &mut cfg.dataset.source {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        agt::certifier::validate_kset(&self.certify.kset)?;
        if let Some(beta) = self.certify.beta {
            anyhow::ensure!(
                beta > 0.0 && beta.is_finite(),
                "certify.beta must be positive, got {beta}"
            );
        }
        let p = &self.privacy;
        anyhow::ensure!(!p.epsilons.is_empty(), "privacy.epsilons is empty");
        anyhow::ensure!(
            p.epsilons.iter().all(|e| *e > 0.0 && e.is_finite()),
            "privacy.epsilons must be positive"
        );
        anyhow::ensure!(
            p.delta > 0.0 && p.delta < 1.0,
            "privacy.delta must lie in (0, 1)"
        );
        anyhow::ensure!(
            self.oracle.pool_scale > 0.0,
            "oracle.pool_scale must be positive"
        );
        Ok(())
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.shuffle_seed = seed.wrapping_add(1);
        self.train.init_seed = seed.wrapping_add(2);
        self.privacy.seed = seed.wrapping_add(3);
        self.oracle.seed = seed.wrapping_add(4);
    }

    /// β used for smooth-sensitivity bounds stored with the bundle.
    pub fn beta(&self) -> f64 {
        self.certify
            .beta
            .unwrap_or_else(|| self.privacy.epsilons[0] / (2.0 * (2.0 / self.privacy.delta).ln()))
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order in the
    /// TOML file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

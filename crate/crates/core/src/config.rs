//! Run configuration: every module's settings in one JSON document, plus a
//! content fingerprint that identifies the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{CategoryTaxonomy, ClassifierConfig};
use crate::conditioning::ConditionConfig;
use crate::dataset::NamingRule;
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::latent::PretrainOptions;
use crate::model::{SrConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Train / val / test fractions.
    pub fractions: [f64; 3],
    /// Fixed test-set size; overrides the test fraction when set.
    pub test_count: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.8, 0.1, 0.1],
            test_count: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub steps: usize,
    pub eta: f64,
    /// Images denoised together per DDIM run.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            chunk: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub grid_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grid_rows: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub taxonomy: CategoryTaxonomy,
    pub naming: NamingRule,
    pub degradation: DegradationSpec,
    pub splits: SplitConfig,
    pub classifier: ClassifierConfig,
    pub autoencoder_pretrain: PretrainOptions,
    pub model: SrConfig,
    pub training: TrainOptions,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Full ship taxonomy with desk-scale model dimensions.
    fn default() -> Self {
        let taxonomy = CategoryTaxonomy::ships();
        let mut model = SrConfig::default();
        model.condition.num_classes = taxonomy.len();
        Self {
            seed: 0,
            taxonomy,
            naming: NamingRule::default(),
            degradation: DegradationSpec::default(),
            splits: SplitConfig::default(),
            classifier: ClassifierConfig::default(),
            autoencoder_pretrain: PretrainOptions::default(),
            model,
            training: TrainOptions::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the synthetic four-category corpus.
    pub fn desk() -> Self {
        let taxonomy = crate::synth::desk_taxonomy();
        let mut cfg = Self {
            taxonomy,
            ..Self::default()
        };
        cfg.model.condition = ConditionConfig {
            num_classes: cfg.taxonomy.len(),
            ..ConditionConfig::default()
        };
        cfg.classifier = ClassifierConfig {
            input_side: 64,
            finetune_degraded: false,
            ..ClassifierConfig::default()
        };
        cfg.splits = SplitConfig {
            fractions: [0.8, 0.0, 0.2],
            test_count: None,
        };
        cfg.training.epochs = 30;
        cfg.training.lr = 2e-3;
        cfg.sampling.steps = 20;
        cfg
    }

    /// Apply the global seed to every stage that owns one.
    pub fn with_seed(mut self, s: u64) -> Self {
        self.seed = s;
        self.classifier.seed = s;
        self.autoencoder_pretrain.seed = s;
        self.model.seed = s;
        self.training.seed = s;
        self.sampling.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.condition.num_classes != self.taxonomy.len() {
            return Err(Error::Config(format!(
                "conditioning expects {} classes but the taxonomy has {}",
                self.model.condition.num_classes,
                self.taxonomy.len()
            )));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.model.schedule.timesteps {
            return Err(Error::Config(format!(
                "sampling steps {} outside 1..={}",
                self.sampling.steps, self.model.schedule.timesteps
            )));
        }
        if self.training.batch_size == 0 || self.sampling.chunk == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization: compact JSON with object keys sorted.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json's default map is ordered, so going through Value sorts keys.
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(hex::encode(&digest[..16]))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

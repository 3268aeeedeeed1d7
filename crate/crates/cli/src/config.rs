//! Experiment configuration: one TOML document per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgtc::annotation::Strategy;
use sgtc::cotrain::{FusionRule, TrainConfig};
use sgtc::metrics::FeatureTap;
use sgtc::phantom::PhantomTemplate;
use sgtc::semantic::PromptPreset;

use crate::error::{CliError, Result};

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Phantoms generated into `<output_dir>/data`.
    Phantom {
        #[serde(default = "default_labeled")]
        n_labeled: usize,
        #[serde(default = "default_unlabeled")]
        n_unlabeled: usize,
        #[serde(default = "default_test")]
        n_test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        template: PhantomTemplate,
    },
    /// An existing dataset described by a manifest file.
    Manifest { path: PathBuf },
}

fn default_labeled() -> usize {
    2
}

fn default_unlabeled() -> usize {
    18
}

fn default_test() -> usize {
    4
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Phantom {
            n_labeled: default_labeled(),
            n_unlabeled: default_unlabeled(),
            n_test: default_test(),
            seed: 0,
            template: PhantomTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fusion: FusionRule,
    pub feature_tap: FeatureTap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required for standalone runs; ablation plans assign one per run.
    #[serde(default)]
    pub output_dir: PathBuf,
    /// Overrides `train.strategy`.
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Overrides `train.semantic.prompt`.
    #[serde(default)]
    pub prompt: PromptPreset,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_strategy() -> Strategy {
    Strategy::Sca
}

impl ExperimentConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            strategy: default_strategy(),
            prompt: PromptPreset::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pushes the top-level choices into the training block and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.strategy = self.strategy;
        self.train.semantic.prompt = self.prompt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DatasetConfig::Phantom {
            n_labeled,
            n_unlabeled,
            n_test,
            seed,
            template,
        } = &self.dataset
        {
            if *n_labeled == 0 || *n_test == 0 {
                return Err(CliError::Config("n_labeled and n_test must be >= 1".into()));
            }
            if *n_unlabeled == 0 {
                return Err(CliError::Config("n_unlabeled must be >= 1".into()));
            }
            template.sample(*seed, 0).validate()?;
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.output_dir.join("train")
    }

    /// Manifest path for either dataset kind.
    pub fn manifest_path(&self) -> PathBuf {
        match &self.dataset {
            DatasetConfig::Phantom { .. } => self.data_dir().join(sgtc::dataset::MANIFEST_FILE),
            DatasetConfig::Manifest { path } => path.clone(),
        }
    }
}

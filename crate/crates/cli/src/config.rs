//! Experiment configuration files.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mvinfo_core::datagen::{ContinuousSpec, DiscreteSpec, PairStrategy};
use mvinfo_core::eval::CriticConfig;
use mvinfo_core::train::{LossConfig, ModelConfig, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::suites::TableFamily;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    VerifyTheorems,
    Bounds,
    Train,
    Eval,
    MiConvergence,
    GenData,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::VerifyTheorems,
        Mode::Bounds,
        Mode::Train,
        Mode::Eval,
        Mode::MiConvergence,
        Mode::GenData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::VerifyTheorems => "verify-theorems",
            Mode::Bounds => "bounds",
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::MiConvergence => "mi-convergence",
            Mode::GenData => "gen-data",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// Data block shared by the continuous-data modes and `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_strategy")]
    pub strategy: PairStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous: Option<ContinuousSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete: Option<DiscreteSpec>,
}

fn default_strategy() -> PairStrategy {
    PairStrategy::SameClass
}

impl DataConfig {
    pub fn continuous_spec(&self) -> ContinuousSpec {
        self.continuous.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Knn,
    Linear,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Directory holding `seed-<n>` checkpoints written by `train`. Without
    /// it the untrained encoder is evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Knn,
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Flip probability of the binary symmetric pair.
    pub flip: f64,
    pub n_grid: Vec<usize>,
    pub repeats: usize,
    pub critic: CriticConfig,
    pub slope_range: [f64; 2],
    pub max_inversions: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            flip: 0.1,
            n_grid: vec![256, 1024, 4096, 16384],
            repeats: 10,
            critic: CriticConfig::default(),
            slope_range: [-0.65, -0.35],
            max_inversions: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<TableFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn missing(mode: Mode, block: &str) -> CliError {
    CliError::Config(format!("{mode} mode requires a `{block}` block"))
}

impl ExperimentConfig {
    /// Parses a config file's text; errors carry line and column.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
    }

    /// Checks that the blocks `mode` needs are present and valid.
    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(CliError::Config(format!(
                    "config declares mode `{m}` but `{mode}` was requested"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let bad = |e: mvinfo_core::Error| CliError::Config(e.to_string());
        match mode {
            Mode::VerifyTheorems | Mode::Bounds => {
                let t = self.tables.as_ref().ok_or_else(|| missing(mode, "tables"))?;
                t.validate().map_err(|e| CliError::Config(format!("tables: {e}")))?;
            }
            Mode::Train => {
                self.train_config()?.validate().map_err(bad)?;
                self.data_block(mode)?.continuous_spec().validate().map_err(bad)?;
            }
            Mode::Eval => {
                self.data_block(mode)?.continuous_spec().validate().map_err(bad)?;
            }
            Mode::GenData => {
                let d = self.data_block(mode)?;
                if let Some(spec) = &d.discrete {
                    spec.validate().map_err(bad)?;
                }
                d.continuous_spec().validate().map_err(bad)?;
            }
            Mode::MiConvergence => {
                let c = self.convergence.as_ref().ok_or_else(|| missing(mode, "convergence"))?;
                if !(0.0..=1.0).contains(&c.flip) {
                    return Err(CliError::Config("convergence.flip must lie in [0, 1]".into()));
                }
                if c.slope_range[0] > c.slope_range[1] {
                    return Err(CliError::Config("convergence.slope_range must be [low, high]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn data_block(&self, mode: Mode) -> Result<&DataConfig, CliError> {
        self.data.as_ref().ok_or_else(|| missing(mode, "data"))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            model: self.model.clone().unwrap_or_default(),
            loss: self.loss.clone().ok_or_else(|| missing(Mode::Train, "loss"))?,
            optimizer: self
                .optimizer
                .clone()
                .ok_or_else(|| missing(Mode::Train, "optimizer"))?,
            eval_every: self.eval_every.unwrap_or(0),
            labeled_per_class: self.labeled_per_class.unwrap_or(5),
        })
    }

    /// SHA-256 of the canonical JSON of everything that affects results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let value = serde_json::to_value(&canonical).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

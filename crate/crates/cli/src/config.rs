use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tlmest::datagen::ScenarioConfig;
use tlmest::experiments::ExperimentConfig;
use tlmest::selection::SelectionConfig;
use tlmest::transfer::TransferConfig;
use tlmest::tuning::TuningGrid;
use tlmest::{LossFamily, Regularizer, SolverOptions};

pub const SEED_ENV: &str = "TLMEST_SEED";

/// Declarative run configuration shared by every subcommand; each command
/// reads the sections it needs and command-line flags override them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub data: Option<DataSpec>,
    pub out: Option<PathBuf>,
    pub scenario: Option<ScenarioConfig>,
    pub fit: Option<FitSettings>,
    pub tuning: Option<TuningGrid>,
    pub transfer: Option<TransferConfig>,
    pub selection: Option<SelectionConfig>,
    pub experiment: Option<ExperimentConfig>,
}

/// Where the datasets come from: a study directory (or its `study.json`),
/// or explicit files with the target first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub study: Option<PathBuf>,
    pub files: Vec<PathBuf>,
    pub family: Option<LossFamily>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub regularizer: Option<Regularizer>,
    /// Cross-validated when absent.
    pub lambda: Option<f64>,
    pub solver: SolverOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }
}

/// Seed precedence: flag, then the environment, then the config file.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => match v.trim().parse::<u64>() {
            Ok(s) => Ok(Some(s)),
            Err(_) => bail!("{SEED_ENV}='{v}' is not an unsigned integer"),
        },
        Err(std::env::VarError::NotPresent) => Ok(config),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

//! Run configuration: built-in defaults, overlaid by an optional TOML (or
//! JSON) file, overlaid by command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tapas_core::cascade::{CascadeConfig, RolloutConfig};
use tapas_core::gaussian::Regularization;
use tapas_core::pipeline::PipelineConfig;
use tapas_core::synth::ScenarioSpec;

pub const SEED_ENV: &str = "TAPAS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub scenario: ScenarioSpec,
    pub pipeline: PipelineConfig,
    pub rollout: RolloutConfig,
    pub regularization: Regularization,
    pub cascade: CascadeConfig,
    pub episodes: usize,
    pub sequential: bool,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scenario: ScenarioSpec::default(),
            pipeline: PipelineConfig::default(),
            rollout: RolloutConfig::default(),
            regularization: Regularization::default(),
            cascade: CascadeConfig::default(),
            episodes: 100,
            sequential: false,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    /// Flag, then config file, then `TAPAS_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match (flag, self.seed) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            bail!("episodes must be at least 1");
        }
        if self.pipeline.k == 0 {
            bail!("k must be at least 1");
        }
        Ok(())
    }
}

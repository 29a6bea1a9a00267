//! Run configuration file. Every field is optional; command-line flags win.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cohort_core::eval::{Strategy, DEFAULT_RESAMPLES, DEFAULT_SEED};
use cohort_core::{Aggregation, Metric};
use serde::Deserialize;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;
pub const DEFAULT_MAX_INFLIGHT: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub metric: Option<Metric>,
    pub strategies: Option<Vec<String>>,
    pub resamples: Option<usize>,
    pub level: Option<f64>,
    pub seed: Option<u64>,
    pub lenient: Option<bool>,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub aggregation: Option<Aggregation>,
    pub feature_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Rule,
    Llm,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendChoice>,
    pub endpoint: Option<String>,
    pub max_inflight: Option<usize>,
    pub timeout_ms: Option<u64>,
    pub fallback: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub addr: Option<String>,
    pub body_limit: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }

    pub fn resamples(&self, flag: Option<usize>) -> usize {
        flag.or(self.resamples).unwrap_or(DEFAULT_RESAMPLES)
    }

    pub fn strategies(&self, flag: &[String]) -> anyhow::Result<Vec<Strategy>> {
        let names: Vec<String> = if !flag.is_empty() {
            flag.iter().flat_map(|s| s.split(',')).map(str::to_string).collect()
        } else if let Some(s) = &self.strategies {
            s.clone()
        } else {
            vec![
                "single:DLI".into(),
                "single:DLS".into(),
                "single:Sybil".into(),
                "per_cohort_best".into(),
                "retrieval".into(),
            ]
        };
        names
            .iter()
            .map(|n| n.trim().parse::<Strategy>().map_err(anyhow::Error::msg))
            .collect()
    }
}

/// Picks the flag, then the config value, failing when neither names a path.
pub fn required_path(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| config.clone()) {
        Some(p) => Ok(p),
        None => bail!("--{name} is required (or set `{name}` in the run configuration)"),
    }
}

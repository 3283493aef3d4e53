//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::monitor::MonitorTrainConfig;
use crate::predictor::TrainConfig;
use crate::query::QueryConfig;
use crate::retriever::{CorpusConfig, LatencyModel};
use crate::runtime::RuntimeConfig;
use crate::synth::{LabelConfig, SynthConfig};

/// Environment variable that overrides the config path given on the command line.
pub const CONFIG_ENV: &str = "PREFETCH_RAG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub latency: LatencyModel,
    pub k_docs: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            latency: LatencyModel::default(),
            k_docs: 5,
        }
    }
}

/// Workload sizes for training and benchmarking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Traces used to train the predictor.
    pub predictor_traces: usize,
    /// Traces used to train the monitor heads.
    pub monitor_traces: usize,
    pub eval_queries: usize,
    /// Tokens per evaluation query; training traces use `synth.n_tokens`.
    pub eval_tokens: usize,
    pub corpus_seed: u64,
    /// Seed offsets keep training and evaluation traces disjoint.
    pub train_seed_offset: u64,
    pub eval_seed_offset: u64,
    pub latency_grid_ms: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            predictor_traces: 60,
            monitor_traces: 1100,
            eval_queries: 200,
            eval_tokens: 256,
            corpus_seed: 9,
            train_seed_offset: 1_000_000,
            eval_seed_offset: 0,
            latency_grid_ms: vec![50.0, 125.0, 200.0, 500.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub retriever: RetrieverConfig,
    pub labels: LabelConfig,
    pub query: QueryConfig,
    pub predictor: TrainConfig,
    pub monitor: MonitorTrainConfig,
    pub runtime: RuntimeConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.retriever.latency.validate()?;
        if self.retriever.k_docs == 0 {
            return Err(Error::Config("retriever.k_docs must be >= 1".into()));
        }
        self.query.validate()?;
        self.runtime.validate()?;
        let b = &self.bench;
        if b.predictor_traces == 0 || b.monitor_traces == 0 || b.eval_queries == 0 || b.eval_tokens == 0 {
            return Err(Error::Config("bench sizes must be >= 1".into()));
        }
        if b.latency_grid_ms.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("bench.latency_grid_ms entries must be positive".into()));
        }
        Ok(())
    }

    /// Workload whose context turns toward each upcoming topic well ahead of
    /// the need, with needs spaced beyond the trigger spacing.
    pub fn topic_shifting() -> Config {
        let mut cfg = Config::default();
        cfg.synth.min_event_gap = 56;
        cfg.synth.event_rate = 0.04;
        cfg.synth.lead_window = 12;
        cfg.synth.lead_concentration = 0.6;
        cfg
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// The config path to use: the environment override when set, else `cli`.
pub fn resolve_path(cli: Option<&Path>) -> Option<PathBuf> {
    match std::env::var_os(CONFIG_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => cli.map(Path::to_path_buf),
    }
}

/// Load from the resolved path, or defaults when no path is given.
pub fn load_resolved(cli: Option<&Path>) -> Result<Config> {
    match resolve_path(cli) {
        Some(p) => Config::load(&p),
        None => Ok(Config::default()),
    }
}

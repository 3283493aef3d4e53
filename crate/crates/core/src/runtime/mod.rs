//! Token-by-token generation with retrieval, in virtual time.
//!
//! Every mode shares one discrete-event loop: tokens advance the clock,
//! retrievals occupy a bounded worker pool and finish into an LRU cache, and
//! each information need is served from the cache or by a blocking fallback.
//! With `concurrent` set the ranking work runs on real worker threads; the
//! virtual timeline, and therefore the log, is the same.

pub mod cache;
mod engine;
pub mod guard;
pub mod log;
pub mod queue;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitor::{MonitorConfig, MonitorParams};
use crate::policy::{PolicyConfig, PolicyParams, RewardEvent, RewardTable};
use crate::predictor::{PredictionConfig, PredictorParams};
use crate::query::{QueryBuilder, QueryConfig};
use crate::retriever::{Corpus, LatencyModel, SimRetriever};
use crate::synth::{Trace, World};

pub use engine::need_tokens;
use guard::GuardConfig;
use log::RunEventLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoRetrieval,
    SyncReactive,
    EntropyThreshold,
    FixedInterval,
    StaleQuery,
    Predictive,
    OraclePrefetch,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::NoRetrieval,
        Mode::SyncReactive,
        Mode::EntropyThreshold,
        Mode::FixedInterval,
        Mode::StaleQuery,
        Mode::Predictive,
        Mode::OraclePrefetch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoRetrieval => "no_retrieval",
            Mode::SyncReactive => "sync_reactive",
            Mode::EntropyThreshold => "entropy_threshold",
            Mode::FixedInterval => "fixed_interval",
            Mode::StaleQuery => "stale_query",
            Mode::Predictive => "predictive",
            Mode::OraclePrefetch => "oracle_prefetch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    /// Prompt retrieval overlaps prefill instead of blocking after it.
    pub fn is_async(self) -> bool {
        matches!(
            self,
            Mode::FixedInterval | Mode::StaleQuery | Mode::Predictive | Mode::OraclePrefetch
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub mode: Mode,
    pub prefill_ms: f64,
    pub token_time_ms: f64,
    /// Added to every token in predictive mode.
    pub predictor_overhead_ms: f64,
    pub workers: usize,
    pub cache_capacity: usize,
    pub fixed_interval: usize,
    /// Oracle issue lead in tokens; the prediction horizon when unset.
    pub oracle_lead: Option<usize>,
    /// A prefetch can serve a need at most this many tokens after its issue.
    pub candidate_window: usize,
    /// Tokens a Reuse decision stays armed.
    pub reuse_horizon: usize,
    /// Cosine to the need at or above which served docs count as relevant.
    pub relevance_threshold: f64,
    pub online_updates: bool,
    /// Step size for the pseudo-label updates routed to the predictor and monitor.
    pub online_lr: f64,
    pub concurrent: bool,
    pub prediction: PredictionConfig,
    pub guard: GuardConfig,
    pub monitor: MonitorConfig,
    pub policy: PolicyConfig,
    pub rewards: RewardTable,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            mode: Mode::Predictive,
            prefill_ms: 60.0,
            token_time_ms: 48.2,
            predictor_overhead_ms: 2.7,
            workers: 2,
            cache_capacity: cache::DEFAULT_CAPACITY,
            fixed_interval: 32,
            oracle_lead: None,
            candidate_window: 50,
            reuse_horizon: 30,
            relevance_threshold: 0.6,
            online_updates: false,
            online_lr: 1e-5,
            concurrent: false,
            prediction: PredictionConfig::default(),
            guard: GuardConfig::default(),
            monitor: MonitorConfig::default(),
            policy: PolicyConfig::default(),
            rewards: RewardTable::default(),
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prefill_ms", self.prefill_ms),
            ("token_time_ms", self.token_time_ms),
            ("predictor_overhead_ms", self.predictor_overhead_ms),
            ("online_lr", self.online_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("runtime.{name} must be finite and >= 0")));
            }
        }
        if !(1..=64).contains(&self.workers) {
            return Err(Error::Config("runtime.workers must lie in 1..=64".into()));
        }
        if self.cache_capacity == 0 || self.fixed_interval == 0 || self.candidate_window == 0 {
            return Err(Error::Config(
                "cache_capacity, fixed_interval and candidate_window must be >= 1".into(),
            ));
        }
        if self.oracle_lead == Some(0) {
            return Err(Error::Config("runtime.oracle_lead must be >= 1".into()));
        }
        self.prediction.validate()?;
        self.guard.validate()?;
        self.monitor.validate()?;
        Ok(())
    }

    pub fn oracle_lead(&self) -> usize {
        self.oracle_lead.unwrap_or(self.prediction.horizon)
    }
}

/// Trained components used by predictive mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub predictor: PredictorParams,
    pub monitor: MonitorParams,
    pub policy: PolicyParams,
}

/// Retriever plus query builder, shared read-only by all runs.
#[derive(Debug, Clone)]
pub struct Env {
    pub retriever: SimRetriever,
    pub queries: QueryBuilder,
}

impl Env {
    pub fn new(world: &World, corpus: Arc<Corpus>, latency: LatencyModel, k_docs: usize, query: QueryConfig) -> Result<Self> {
        Ok(Env {
            retriever: SimRetriever::new(corpus, latency, k_docs)?,
            queries: QueryBuilder::new(query, world.emb_dim(), world.prototypes.clone())?,
        })
    }

    /// Same corpus and queries with a different latency model.
    pub fn with_latency(&self, latency: LatencyModel) -> Result<Self> {
        latency.validate()?;
        let mut env = self.clone();
        env.retriever.latency = latency;
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: RunEventLog,
    pub rewards: Vec<RewardEvent>,
    /// Components after online updates; `None` when updates are off.
    pub bundle: Option<Bundle>,
}

/// Generate one trace under `cfg.mode`.
///
/// `bundle` is required only in predictive mode.
pub fn run_generation(trace: &Trace, bundle: Option<&Bundle>, env: &Env, cfg: &RuntimeConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.mode == Mode::Predictive && bundle.is_none() {
        return Err(Error::Config("predictive mode needs trained parameters".into()));
    }
    trace.validate()?;
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    engine::run(trace, bundle, env, cfg, seed)
}

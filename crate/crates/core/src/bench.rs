//! Metrics from event logs, baseline runs and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::math;
use crate::monitor::{self, MonitorParams};
use crate::parallel::{self, Exec};
use crate::policy::PolicyParams;
use crate::predictor::{self, PredictionConfig, PredictorParams};
use crate::retriever::{Corpus, LatencyModel};
use crate::runtime::log::{EventKind, RetrievalSource, RunEventLog, Served};
use crate::runtime::{run_generation, Bundle, Env, Mode, RunOutput, RuntimeConfig};
use crate::synth::{label_oracle, synth_batch, SynthConfig, Trace, World};

pub const REPORT_VERSION: u32 = 1;

/// Confidence above this is the high band.
pub const HIGH_BAND: f64 = 0.8;
/// Confidence above this (and not high) is the medium band.
pub const MEDIUM_BAND: f64 = 0.5;

/// (F1 × 1000) / E2E in milliseconds.
pub fn efficiency(sim_f1: f64, e2e_ms: f64) -> f64 {
    sim_f1 * 1000.0 / e2e_ms
}

/// E2E in seconds divided by EM / 100; undefined at EM = 0.
pub fn qal(e2e_ms: f64, sim_em: f64) -> Option<f64> {
    (sim_em > 0.0).then(|| (e2e_ms / 1000.0) / (sim_em / 100.0))
}

/// Nearest-rank percentile of sorted values: the ⌈p·n/100⌉-th smallest.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub horizon: usize,
    pub relevance_threshold: f64,
    /// A prefetch is productive when a need follows within this many tokens.
    pub productive_horizon: usize,
    /// A false positive counts as reused when served within this many tokens.
    pub reuse_window: usize,
}

impl MetricsConfig {
    pub fn from_runtime(r: &RuntimeConfig) -> Self {
        MetricsConfig {
            horizon: r.prediction.horizon,
            relevance_threshold: r.relevance_threshold,
            productive_horizon: r.guard.unproductive_horizon,
            reuse_window: r.candidate_window,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self::from_runtime(&RuntimeConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandStats {
    /// Productive prefetches in the band.
    pub n: usize,
    pub lead_mean: Option<f64>,
    pub lead_median: Option<f64>,
    pub lead_std: Option<f64>,
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfidenceBands {
    pub high: BandStats,
    pub medium: BandStats,
    pub low: BandStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_queries: usize,
    pub n_tokens: usize,
    pub n_needs: usize,
    pub ttft_ms: f64,
    pub e2e_ms: f64,
    pub ret_per_1k: f64,
    pub hit_rate: f64,
    pub sim_em: f64,
    pub sim_f1: f64,
    pub efficiency: f64,
    pub qal: Option<f64>,
    pub e2e_percentiles: Percentiles,
    pub auroc: Option<f64>,
    pub lead_time: ConfidenceBands,
    pub mean_lead_time: Option<f64>,
    pub mean_qrs: Option<f64>,
    pub retrievals: usize,
    pub prefetches: usize,
    pub triggers: usize,
    pub skips: usize,
    pub hits: usize,
    pub misses: usize,
    pub fallbacks: usize,
    /// Requests withdrawn before finishing; not counted in `retrievals`.
    pub cancelled: usize,
    pub fp_total: usize,
    pub fp_rate: Option<f64>,
    pub fp_reuse_within_50: usize,
    pub fp_never_used: usize,
}

struct Prefetch {
    issue: usize,
    trigger: usize,
    confidence: f64,
    served: bool,
}

fn band(confidence: f64) -> usize {
    if confidence > HIGH_BAND {
        0
    } else if confidence > MEDIUM_BAND {
        1
    } else {
        2
    }
}

fn band_stats(leads: &[f64], hits: &[bool]) -> BandStats {
    if leads.is_empty() {
        return BandStats::default();
    }
    let mut sorted = leads.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = math::mean(leads);
    let var = leads.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / leads.len() as f64;
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    BandStats {
        n,
        lead_mean: Some(mean),
        lead_median: Some(median),
        lead_std: Some(var.sqrt()),
        hit_rate: Some(hits.iter().filter(|h| **h).count() as f64 / n as f64),
    }
}

/// Aggregate metrics over per-query logs.
pub fn compute_metrics(logs: &[RunEventLog], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if logs.is_empty() {
        return Err(Error::Empty("event logs"));
    }
    let mut ttfts = Vec::new();
    let mut e2es = Vec::new();
    let mut n_tokens = 0;
    let mut best_cos = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut qrs = Vec::new();
    let mut band_leads: [Vec<f64>; 3] = Default::default();
    let mut band_hits: [Vec<bool>; 3] = Default::default();
    let mut all_leads = Vec::new();
    let (mut retrievals, mut prefetches, mut triggers, mut skips, mut hits, mut misses, mut fallbacks) = (0, 0, 0, 0, 0, 0, 0);
    let mut cancelled = 0;
    let (mut fp_total, mut fp_reused) = (0, 0);

    for (q, log) in logs.iter().enumerate() {
        log.validate()?;
        let Some(EventKind::QueryStart { n_tokens: n, .. }) = log.events.first().map(|e| &e.kind) else {
            return Err(Error::Log(format!("query {q} does not open with query_start")));
        };
        let n = *n;
        let end = match log.events.last() {
            Some(e) if e.kind == EventKind::QueryEnd => e.time_ms,
            _ => return Err(Error::Log(format!("query {q} does not close with query_end"))),
        };
        let mut first_token = None;
        let mut p_hat: BTreeMap<usize, f64> = BTreeMap::new();
        let mut needs = BTreeSet::new();
        let mut sources = BTreeMap::new();
        let mut requests: BTreeMap<u64, Prefetch> = BTreeMap::new();
        let mut used_at: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &log.events {
            match &e.kind {
                EventKind::TokenEmitted { p_hat: p } => {
                    first_token.get_or_insert(e.time_ms);
                    if let Some(p) = p {
                        p_hat.insert(e.token_index, *p);
                    }
                }
                EventKind::Trigger { .. } => triggers += 1,
                EventKind::Skip { .. } => skips += 1,
                EventKind::Enqueue {
                    request_id,
                    trigger_token,
                    confidence,
                    ..
                } => {
                    requests.insert(
                        *request_id,
                        Prefetch {
                            issue: e.token_index,
                            trigger: *trigger_token,
                            confidence: *confidence,
                            served: false,
                        },
                    );
                }
                EventKind::RetrievalStart { request_id, source } => {
                    sources.insert(*request_id, *source);
                }
                EventKind::Cancel { request_id: Some(_), .. } => cancelled += 1,
                EventKind::RetrievalFinish { request_id, qrs: v, .. } => {
                    retrievals += 1;
                    if sources.get(request_id) == Some(&RetrievalSource::Prefetch) {
                        qrs.push(*v);
                    }
                }
                EventKind::CacheHit { request_id, via } => {
                    hits += 1;
                    used_at.entry(*request_id).or_insert(e.token_index);
                    if *via == Served::Prefetch {
                        if let Some(r) = requests.get_mut(request_id) {
                            r.served = true;
                        }
                    }
                }
                EventKind::CacheMiss { .. } => misses += 1,
                EventKind::Integrate { served, best_cos: b } => {
                    needs.insert(e.token_index);
                    best_cos.push(*b);
                    if *served == Served::Sync {
                        fallbacks += 1;
                    }
                }
                _ => {}
            }
        }
        let Some(ttft) = first_token else {
            return Err(Error::Log(format!("query {q} emitted no tokens")));
        };
        ttfts.push(ttft);
        e2es.push(end);
        n_tokens += n;
        prefetches += requests.len();

        for (t, p) in &p_hat {
            if t + cfg.horizon < n {
                scores.push(*p);
                labels.push(needs.range(t + 1..=t + cfg.horizon).next().is_some());
            }
        }
        for (id, r) in &requests {
            match needs.range(r.issue + 1..=r.issue + cfg.productive_horizon).next() {
                Some(&need) => {
                    let lead = need as f64 - r.trigger as f64;
                    band_leads[band(r.confidence)].push(lead);
                    band_hits[band(r.confidence)].push(r.served);
                    all_leads.push(lead);
                }
                None => {
                    fp_total += 1;
                    if used_at.get(id).is_some_and(|&t| t <= r.issue + cfg.reuse_window) {
                        fp_reused += 1;
                    }
                }
            }
        }
    }

    let n_needs = best_cos.len();
    let sim_em = if n_needs == 0 {
        0.0
    } else {
        100.0 * best_cos.iter().filter(|b| **b >= cfg.relevance_threshold).count() as f64 / n_needs as f64
    };
    let sim_f1 = if n_needs == 0 { 0.0 } else { 100.0 * math::mean(&best_cos) };
    let e2e_ms = math::mean(&e2es);
    let mut sorted = e2es.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p| nearest_rank(&sorted, p).expect("non-empty");
    let auroc = match predictor::auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass { .. }) | Err(Error::Empty(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n_queries: logs.len(),
        n_tokens,
        n_needs,
        ttft_ms: math::mean(&ttfts),
        e2e_ms,
        ret_per_1k: 1000.0 * retrievals as f64 / n_tokens as f64,
        hit_rate: if n_needs == 0 { 0.0 } else { hits as f64 / (hits + misses) as f64 },
        sim_em,
        sim_f1,
        efficiency: efficiency(sim_f1, e2e_ms),
        qal: qal(e2e_ms, sim_em),
        e2e_percentiles: Percentiles {
            p50: pct(50.0),
            p95: pct(95.0),
            p99: pct(99.0),
        },
        auroc,
        lead_time: ConfidenceBands {
            high: band_stats(&band_leads[0], &band_hits[0]),
            medium: band_stats(&band_leads[1], &band_hits[1]),
            low: band_stats(&band_leads[2], &band_hits[2]),
        },
        mean_lead_time: (!all_leads.is_empty()).then(|| math::mean(&all_leads)),
        mean_qrs: (!qrs.is_empty()).then(|| math::mean(&qrs)),
        retrievals,
        prefetches,
        triggers,
        skips,
        hits,
        misses,
        fallbacks,
        cancelled,
        fp_total,
        fp_rate: (prefetches > 0).then(|| fp_total as f64 / prefetches as f64),
        fp_reuse_within_50: fp_reused,
        fp_never_used: fp_total - fp_reused,
    })
}

/// Run every trace under one runtime config. Online updates carry the
/// components from one query to the next, so those runs are sequential.
pub fn run_traces(
    traces: &[Trace],
    bundle: Option<&Bundle>,
    env: &Env,
    cfg: &RuntimeConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<RunOutput>> {
    if !cfg.online_updates {
        return parallel::map(exec, traces, |t| run_generation(t, bundle, env, cfg, seed))
            .into_iter()
            .collect();
    }
    let mut current = bundle.cloned();
    let mut out = Vec::with_capacity(traces.len());
    for t in traces {
        let o = run_generation(t, current.as_ref(), env, cfg, seed)?;
        if let Some(b) = &o.bundle {
            current = Some(b.clone());
        }
        out.push(o);
    }
    Ok(out)
}

pub fn run_baseline(
    mode: Mode,
    cfg: &RuntimeConfig,
    traces: &[Trace],
    env: &Env,
    bundle: Option<&Bundle>,
    seed: u64,
    exec: Exec,
) -> Result<(MetricsReport, Vec<RunOutput>)> {
    let cfg = RuntimeConfig { mode, ..cfg.clone() };
    let outs = run_traces(traces, bundle, env, &cfg, seed, exec)?;
    let logs: Vec<RunEventLog> = outs.iter().map(|o| o.log.clone()).collect();
    Ok((compute_metrics(&logs, &MetricsConfig::from_runtime(&cfg))?, outs))
}

/// World, corpus and trace seeds derived from one config and seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: Config,
    pub seed: u64,
    pub exec: Exec,
    pub world: World,
    pub env: Env,
}

const SEED_STRIDE: u64 = 10_000_000;
const MONITOR_SEED_OFFSET: u64 = 500_000;

impl Experiment {
    pub fn new(cfg: Config, seed: u64, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let world = World::from_config(&cfg.synth);
        let corpus = Arc::new(Corpus::generate(&world, &cfg.corpus, cfg.bench.corpus_seed));
        let env = Env::new(&world, corpus, cfg.retriever.latency, cfg.retriever.k_docs, cfg.query.clone())?;
        Ok(Experiment {
            cfg,
            seed,
            exec,
            world,
            env,
        })
    }

    fn base(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(SEED_STRIDE).wrapping_add(offset)
    }

    pub fn eval_synth(&self) -> SynthConfig {
        SynthConfig {
            n_tokens: self.cfg.bench.eval_tokens,
            ..self.cfg.synth.clone()
        }
    }

    pub fn eval_traces(&self) -> Result<Vec<Trace>> {
        let b = &self.cfg.bench;
        synth_batch(&self.eval_synth(), self.base(b.eval_seed_offset), b.eval_queries, self.exec)
    }

    pub fn predictor_traces(&self) -> Result<Vec<Trace>> {
        let b = &self.cfg.bench;
        synth_batch(&self.cfg.synth, self.base(b.train_seed_offset), b.predictor_traces, self.exec)
    }

    pub fn monitor_traces(&self) -> Result<Vec<Trace>> {
        let b = &self.cfg.bench;
        synth_batch(
            &self.cfg.synth,
            self.base(b.train_seed_offset + MONITOR_SEED_OFFSET),
            b.monitor_traces,
            self.exec,
        )
    }

    pub fn train_predictor(&self, prediction: &PredictionConfig) -> Result<PredictorParams> {
        let traces = self.predictor_traces()?;
        let inst = predictor::build_instances(&traces, prediction, self.seed, self.exec)?;
        let train = predictor::TrainConfig {
            seed: self.cfg.predictor.seed ^ self.seed,
            ..self.cfg.predictor
        };
        predictor::train_supervised(&inst, &train, self.exec)
    }

    pub fn train_monitor(&self) -> Result<MonitorParams> {
        let traces = self.monitor_traces()?;
        let per_trace = parallel::map(self.exec, &traces, |t| {
            monitor::monitor_instances(t, &label_oracle(t, &self.env.retriever, &self.cfg.labels))
        });
        let mut data = Vec::new();
        for d in per_trace {
            data.extend(d?);
        }
        monitor::train_monitor(&data, &self.cfg.monitor)
    }

    /// Predictor and monitor trained on disjoint synthetic traces; zero policy.
    pub fn train_bundle(&self) -> Result<Bundle> {
        Ok(Bundle {
            predictor: self.train_predictor(&self.cfg.runtime.prediction)?,
            monitor: self.train_monitor()?,
            policy: PolicyParams::default(),
        })
    }

    pub fn run(&self, mode: Mode, traces: &[Trace], bundle: Option<&Bundle>) -> Result<(MetricsReport, Vec<RunOutput>)> {
        run_baseline(mode, &self.cfg.runtime, traces, &self.env, bundle, self.seed, self.exec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub latency_ms: f64,
    /// Percent reduction against the synchronous baseline at the same latency.
    pub ttft_reduction: f64,
    pub e2e_reduction: f64,
    pub hit_rate: f64,
}

pub fn reduction(baseline: f64, ours: f64) -> f64 {
    100.0 * (baseline - ours) / baseline
}

/// Predictive against synchronous retrieval across retrieval medians. Every
/// point reuses the same traces and seed, so latency draws are common
/// random numbers scaled by the median.
pub fn sweep_latency(exp: &Experiment, bundle: &Bundle, traces: &[Trace], grid: &[f64]) -> Result<Vec<LatencyPoint>> {
    if grid.len() < 3 {
        return Err(Error::Config("latency sweep needs at least 3 points".into()));
    }
    grid.iter()
        .map(|&ms| {
            let latency = match exp.cfg.retriever.latency {
                LatencyModel::Fixed { .. } => LatencyModel::Fixed { ms },
                m => m.with_median(ms),
            };
            let env = exp.env.with_latency(latency)?;
            let rc = &exp.cfg.runtime;
            let (sync, _) = run_baseline(Mode::SyncReactive, rc, traces, &env, None, exp.seed, exp.exec)?;
            let (pred, _) = run_baseline(Mode::Predictive, rc, traces, &env, Some(bundle), exp.seed, exp.exec)?;
            Ok(LatencyPoint {
                latency_ms: ms,
                ttft_reduction: reduction(sync.ttft_ms, pred.ttft_ms),
                e2e_reduction: reduction(sync.e2e_ms, pred.e2e_ms),
                hit_rate: pred.hit_rate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    Horizon,
    TauRag,
    Theta,
}

impl HyperParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "horizon" | "delta" => Ok(HyperParam::Horizon),
            "tau_rag" | "tau" => Ok(HyperParam::TauRag),
            "theta" => Ok(HyperParam::Theta),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HyperParam::Horizon => "horizon",
            HyperParam::TauRag => "tau_rag",
            HyperParam::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub param: HyperParam,
    pub value: f64,
    pub auroc: Option<f64>,
    pub hit_rate: f64,
    pub ret_per_1k: f64,
    pub mean_lead_time: Option<f64>,
    pub e2e_ms: f64,
}

/// Predictive runs over a grid of one parameter. The horizon and entropy
/// threshold change the labels, so the predictor is retrained per point; the
/// monitor and policy come from `bundle`.
pub fn sweep_hyper(exp: &Experiment, bundle: &Bundle, traces: &[Trace], param: HyperParam, grid: &[f64]) -> Result<Vec<HyperPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    grid.iter()
        .map(|&v| {
            let mut rc = exp.cfg.runtime.clone();
            match param {
                HyperParam::Horizon => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::Config(format!("horizon {v} must be a positive integer")));
                    }
                    rc.prediction.horizon = v as usize;
                }
                HyperParam::TauRag => rc.prediction.tau_rag = v,
                HyperParam::Theta => rc.prediction.theta = v,
            }
            rc.validate()?;
            let mut b = bundle.clone();
            if param != HyperParam::TauRag {
                b.predictor = exp.train_predictor(&rc.prediction)?;
            }
            let (m, _) = run_baseline(Mode::Predictive, &rc, traces, &exp.env, Some(&b), exp.seed, exp.exec)?;
            Ok(HyperPoint {
                param,
                value: v,
                auroc: m.auroc,
                hit_rate: m.hit_rate,
                ret_per_1k: m.ret_per_1k,
                mean_lead_time: m.mean_lead_time,
                e2e_ms: m.e2e_ms,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ReportHeader {
    pub fn new(command: &str, cfg: &Config, seed: u64) -> Self {
        ReportHeader {
            version: REPORT_VERSION,
            command: command.into(),
            config_hash: cfg.hash(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub header: ReportHeader,
    pub rows: Vec<ModeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepRows {
    Latency { rows: Vec<LatencyPoint> },
    Hyper { rows: Vec<HyperPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub header: ReportHeader,
    #[serde(flatten)]
    pub sweep: SweepRows,
}

/// One row of a mode comparison; reductions are against the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub ttft_ms: f64,
    pub e2e_ms: f64,
    pub sim_em: f64,
    pub sim_f1: f64,
    pub efficiency: f64,
    pub qal: Option<f64>,
    pub hit_rate: f64,
    pub ret_per_1k: f64,
    pub ttft_reduction: f64,
    pub e2e_reduction: f64,
}

pub fn compare(report: &BenchReport, modes: &[Mode]) -> Result<Vec<CompareRow>> {
    let rows: Vec<&ModeRow> = modes
        .iter()
        .map(|m| {
            report
                .rows
                .iter()
                .find(|r| r.mode == *m)
                .ok_or_else(|| Error::Config(format!("report has no {} row", m.name())))
        })
        .collect::<Result<_>>()?;
    let base = &rows.first().ok_or(Error::Empty("comparison modes"))?.metrics;
    Ok(rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            CompareRow {
                mode: r.mode,
                ttft_ms: m.ttft_ms,
                e2e_ms: m.e2e_ms,
                sim_em: m.sim_em,
                sim_f1: m.sim_f1,
                efficiency: efficiency(m.sim_f1, m.e2e_ms),
                qal: qal(m.e2e_ms, m.sim_em),
                hit_rate: m.hit_rate,
                ret_per_1k: m.ret_per_1k,
                ttft_reduction: reduction(base.ttft_ms, m.ttft_ms),
                e2e_reduction: reduction(base.e2e_ms, m.e2e_ms),
            }
        })
        .collect())
}

//! Synthetic generation traces.
//!
//! A trace is a token-indexed sequence of signal frames plus per-token
//! context embeddings. Uncertainty events are scheduled up front; each one
//! shapes the signals around it:
//!
//! * entropy ramps linearly over `ramp_len` tokens to just under `theta`,
//!   jumps above it at the event position and decays right after, so the
//!   first crossing is exactly the event position;
//! * attention entropy, value-norm deltas and the hidden summary carry a
//!   precursor bump that starts 12 to 17 tokens ahead of the event;
//! * hedge flags fire more often in `[e-8, e-2]`;
//! * the context embedding concentrates on the event's need embedding as the
//!   event approaches, keeps concentrating for a class-specific number of
//!   tokens after it and then drifts away. The longer of the class's two
//!   waits applies when the phrase is unfinished at the event.

mod io;
mod oracle;

pub use io::{export_traces, import_traces, read_traces, write_traces};
pub use oracle::{argmax_first, label_oracle, LabelConfig, LabeledInstance, WAITS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, gauss, Rng64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFrame {
    pub token_index: usize,
    pub entropy: f64,
    pub entropy_delta: f64,
    pub attention_entropy: f64,
    pub value_norm_delta: f64,
    pub topk_margin: f64,
    pub hedge_flag: bool,
    pub hidden_summary: Vec<f64>,
}

impl SignalFrame {
    /// Zero-feature frame used to left-pad windows at sequence start.
    pub fn neutral(hidden_dim: usize) -> Self {
        Self {
            token_index: 0,
            entropy: 0.0,
            entropy_delta: 0.0,
            attention_entropy: 0.0,
            value_norm_delta: 0.0,
            topk_margin: 0.0,
            hedge_flag: false,
            hidden_summary: vec![0.0; hidden_dim],
        }
    }

    pub const SCALARS: usize = 6;

    pub fn scalars(&self) -> [f64; Self::SCALARS] {
        [
            self.entropy,
            self.entropy_delta,
            self.attention_entropy,
            self.value_norm_delta,
            self.topk_margin,
            if self.hedge_flag { 1.0 } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventClass {
    Factual,
    Reasoning,
    Explanation,
}

impl EventClass {
    pub const ALL: [EventClass; 3] = [EventClass::Factual, EventClass::Reasoning, EventClass::Explanation];

    /// Candidate post-crossing waits at which query quality peaks.
    pub fn optimal_waits(self) -> [usize; 2] {
        match self {
            EventClass::Factual => [3, 4],
            EventClass::Reasoning => [2, 3],
            EventClass::Explanation => [1, 2],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEvent {
    pub position: usize,
    pub topic_id: usize,
    pub event_class: EventClass,
    pub need_embedding: Vec<f64>,
    /// Generator intent: 0 when the event repeats the previous need or its
    /// topic has no documents, 1 otherwise.
    pub gold_utility: f64,
    pub redundant: bool,
    /// Tokens after the crossing at which context concentration peaks.
    pub optimal_wait: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: u64,
    pub seed: u64,
    pub theta: f64,
    pub frames: Vec<SignalFrame>,
    pub events: Vec<UncertaintyEvent>,
    pub context_embeddings: Vec<Vec<f64>>,
    /// Ground-truth phrase completeness at each token.
    pub phrase_complete: Vec<bool>,
    /// Half-open token spans where retrieval is suppressed (code, math, quotes).
    pub suppressed_spans: Vec<(usize, usize)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_suppressed(&self, t: usize) -> bool {
        self.suppressed_spans.iter().any(|&(a, b)| t >= a && t < b)
    }

    pub fn event_at(&self, t: usize) -> Option<&UncertaintyEvent> {
        self.events.binary_search_by_key(&t, |e| e.position).ok().map(|i| &self.events[i])
    }

    /// Positions where entropy crosses theta from below.
    pub fn crossings(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (t, f) in self.frames.iter().enumerate() {
            let prev_below = t == 0 || self.frames[t - 1].entropy < self.theta;
            if f.entropy >= self.theta && prev_below {
                out.push(t);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_embeddings.len() != self.frames.len() || self.phrase_complete.len() != self.frames.len() {
            return Err(Error::Invalid("per-token arrays differ in length".into()));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.token_index != t {
                return Err(Error::Invalid(format!("frame {t} has token_index {}", f.token_index)));
            }
            if !(f.entropy >= 0.0) || !(0.0..=1.0).contains(&f.topk_margin) {
                return Err(Error::Invalid(format!("frame {t} out of range")));
            }
        }
        for w in self.events.windows(2) {
            if w[0].position >= w[1].position {
                return Err(Error::Invalid("event positions must be unique and sorted".into()));
            }
        }
        for e in &self.events {
            if !math::is_unit(&e.need_embedding, 1e-6) {
                return Err(Error::Invalid(format!("event at {} has non-unit need", e.position)));
            }
        }
        Ok(())
    }
}

/// Shared embedding geometry: topic prototypes, class signature directions
/// and the hidden-summary precursor direction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub prototypes: Vec<Vec<f64>>,
    pub class_dirs: Vec<Vec<f64>>,
    pub hidden_dir: Vec<f64>,
}

impl World {
    pub fn new(n_topics: usize, emb_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = math::stream(seed, &[0x77, 0x01]);
        let prototypes = (0..n_topics).map(|_| math::random_unit(&mut rng, emb_dim)).collect();
        let class_dirs = (0..3).map(|_| math::random_unit(&mut rng, emb_dim)).collect();
        let hidden_dir = math::random_unit(&mut rng, hidden_dim);
        Self {
            prototypes,
            class_dirs,
            hidden_dir,
        }
    }

    pub fn from_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.n_topics, cfg.emb_dim, cfg.hidden_dim, cfg.world_seed)
    }

    pub fn emb_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn n_topics(&self) -> usize {
        self.prototypes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub position: usize,
    #[serde(default)]
    pub class: Option<EventClass>,
    #[serde(default)]
    pub topic: Option<usize>,
    #[serde(default)]
    pub redundant: bool,
}

impl EventSpec {
    pub fn at(position: usize) -> Self {
        Self {
            position,
            class: None,
            topic: None,
            redundant: false,
        }
    }

    pub fn class(mut self, c: EventClass) -> Self {
        self.class = Some(c);
        self
    }

    pub fn topic(mut self, t: usize) -> Self {
        self.topic = Some(t);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tokens: usize,
    pub theta: f64,
    /// Explicit schedule; when absent events are drawn at `event_rate`.
    pub events: Option<Vec<EventSpec>>,
    pub event_rate: f64,
    pub min_event_gap: usize,
    pub first_event_min: usize,
    pub entropy_base: f64,
    pub entropy_peak: f64,
    pub entropy_noise: f64,
    pub ramp_len: usize,
    /// Entropy level reached at the end of the ramp, below theta.
    pub ramp_top: f64,
    pub precursor_lead: usize,
    pub precursor_jitter: usize,
    pub attention_base: f64,
    pub attention_gain: f64,
    pub attention_noise: f64,
    pub attention_smoothing: f64,
    pub hedge_base: f64,
    pub hedge_elevated: f64,
    pub hidden_dim: usize,
    pub emb_dim: usize,
    pub n_topics: usize,
    pub world_seed: u64,
    pub uncovered_topics: Vec<usize>,
    pub redundancy_rate: f64,
    /// Relative weights of Factual, Reasoning, Explanation.
    pub class_mix: [f64; 3],
    pub need_noise: f64,
    pub context_drift: f64,
    pub context_noise: f64,
    pub class_signature: f64,
    pub complete_rate: f64,
    pub suppressed_spans: Vec<(usize, usize)>,
    /// Freezes background drift and per-token context noise.
    pub noiseless: bool,
    /// Tokens before an event over which context turns toward its need.
    pub lead_window: usize,
    /// Context concentration on the need at the crossing token.
    pub lead_concentration: f64,
    /// Per-token rate of near-miss precursors that never cross theta.
    /// Only used with a random schedule.
    pub decoy_rate: f64,
    /// Decoy amplitude range relative to a real precursor.
    pub decoy_amplitude: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tokens: 512,
            theta: 2.5,
            events: None,
            event_rate: 0.02,
            min_event_gap: 24,
            first_event_min: 16,
            entropy_base: 0.8,
            entropy_peak: 3.2,
            entropy_noise: 0.1,
            ramp_len: 6,
            ramp_top: 2.15,
            precursor_lead: 14,
            precursor_jitter: 2,
            attention_base: 1.0,
            attention_gain: 1.5,
            attention_noise: 0.18,
            attention_smoothing: 0.7,
            hedge_base: 0.05,
            hedge_elevated: 0.45,
            hidden_dim: 16,
            emb_dim: 64,
            n_topics: 24,
            world_seed: 0x5eed_0f70_91c5,
            uncovered_topics: Vec::new(),
            redundancy_rate: 0.2,
            class_mix: [0.5, 0.3, 0.2],
            need_noise: 0.3,
            context_drift: 0.95,
            context_noise: 0.015,
            class_signature: 0.5,
            complete_rate: 0.65,
            suppressed_spans: Vec::new(),
            noiseless: false,
            lead_window: 16,
            lead_concentration: 0.35,
            decoy_rate: 0.02,
            decoy_amplitude: (0.3, 1.0),
        }
    }
}

// Context concentration on the need embedding after an event.
const CONC_PEAK: f64 = 0.8;
const CONC_FALLOFF: f64 = 0.15;
const POST_DECAY: usize = 6;
const MAX_WAIT: usize = 5;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::Config("n_tokens must be >= 1".into()));
        }
        if !(self.theta > 0.0) {
            return Err(Error::Config(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.ramp_top < self.theta && self.entropy_peak > self.theta && self.entropy_base < self.ramp_top) {
            return Err(Error::Config("need entropy_base < ramp_top < theta < entropy_peak".into()));
        }
        if self.ramp_len == 0 || self.emb_dim == 0 || self.hidden_dim == 0 || self.n_topics < 2 {
            return Err(Error::Config("ramp_len, dims must be >= 1 and n_topics >= 2".into()));
        }
        if self.precursor_lead < 8 + self.precursor_jitter {
            return Err(Error::Config("precursor must start at least 8 tokens ahead".into()));
        }
        if self.lead_window == 0 || !(self.lead_concentration > 0.0 && self.lead_concentration < CONC_PEAK) {
            return Err(Error::Config(format!(
                "lead_window must be >= 1 and lead_concentration in (0, {CONC_PEAK})"
            )));
        }
        let (lo, hi) = self.decoy_amplitude;
        if !(0.0..=1.0).contains(&self.decoy_rate) || !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(
                "decoy_rate must lie in [0, 1] and 0 < decoy_amplitude.0 <= .1 <= 1".into(),
            ));
        }
        if let Some(evs) = &self.events {
            let mut prev: Option<usize> = None;
            for e in evs {
                if e.position >= self.n_tokens {
                    return Err(Error::Config(format!(
                        "event position {} >= n_tokens {}",
                        e.position, self.n_tokens
                    )));
                }
                if e.position < self.ramp_len {
                    return Err(Error::Config(format!(
                        "event position {} is inside the initial ramp ({} tokens)",
                        e.position, self.ramp_len
                    )));
                }
                if let Some(p) = prev {
                    if e.position <= p + self.ramp_len {
                        return Err(Error::Config(format!(
                            "events at {p} and {} are closer than the ramp length",
                            e.position
                        )));
                    }
                } else if e.redundant {
                    return Err(Error::Config("the first event cannot be redundant".into()));
                }
                if e.topic.is_some_and(|t| t >= self.n_topics) {
                    return Err(Error::Config(format!("event topic out of range at {}", e.position)));
                }
                prev = Some(e.position);
            }
        }
        Ok(())
    }
}

fn schedule(cfg: &SynthConfig, rng: &mut Rng64) -> Vec<EventSpec> {
    if let Some(evs) = &cfg.events {
        return evs.clone();
    }
    let start = cfg.first_event_min.max(cfg.ramp_len);
    let gap = cfg.min_event_gap.max(cfg.ramp_len + 1);
    let mut out: Vec<EventSpec> = Vec::new();
    for t in start..cfg.n_tokens {
        let ok = out.last().is_none_or(|e| t >= e.position + gap);
        // draw for every t so the stream stays aligned across configs
        let hit = rng.random::<f64>() < cfg.event_rate;
        if ok && hit {
            out.push(EventSpec::at(t));
        }
    }
    out
}

/// A near-miss: precursor-like signals at `amplitude` with no crossing.
#[derive(Debug, Clone, Copy)]
struct Decoy {
    position: usize,
    amplitude: f64,
    lead: usize,
}

/// Tokens a decoy keeps from any event on either side.
const DECOY_CLEARANCE: usize = 24;

fn decoys(cfg: &SynthConfig, events: &[UncertaintyEvent], seed: u64) -> Vec<Decoy> {
    if cfg.events.is_some() || cfg.decoy_rate == 0.0 {
        return Vec::new();
    }
    let mut rng = math::stream(seed, &[0x5c, 7]);
    let (lo, hi) = cfg.decoy_amplitude;
    let j = cfg.precursor_jitter as i64;
    let mut out: Vec<Decoy> = Vec::new();
    for t in cfg.first_event_min.max(cfg.ramp_len)..cfg.n_tokens {
        let hit = rng.random::<f64>() < cfg.decoy_rate;
        let amplitude = lo + (hi - lo) * rng.random::<f64>();
        let off = if j > 0 { rng.random_range(-j..=j) } else { 0 };
        let clear = events.iter().all(|e| t.abs_diff(e.position) >= DECOY_CLEARANCE)
            && out.last().is_none_or(|d| t >= d.position + DECOY_CLEARANCE);
        if hit && clear {
            out.push(Decoy {
                position: t,
                amplitude,
                lead: (cfg.precursor_lead as i64 + off) as usize,
            });
        }
    }
    out
}

fn pick_class(mix: &[f64; 3], rng: &mut Rng64) -> EventClass {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return EventClass::ALL[i];
        }
        u -= w;
    }
    EventClass::Explanation
}

fn resolve_events(cfg: &SynthConfig, world: &World, specs: &[EventSpec], rng: &mut Rng64) -> Vec<UncertaintyEvent> {
    let dim = cfg.emb_dim;
    let need_scale = cfg.need_noise / (dim as f64).sqrt();
    let mut out: Vec<UncertaintyEvent> = Vec::with_capacity(specs.len());
    for spec in specs {
        // fixed number of draws per event keeps streams aligned
        let u_red = rng.random::<f64>();
        let u_topic = rng.random_range(0..cfg.n_topics);
        let class = pick_class(&cfg.class_mix, rng);
        // placeholder wait, replaced once phrase completeness is known
        let wait_pick = rng.random::<bool>();
        let noise: Vec<f64> = (0..dim).map(|_| need_scale * gauss(rng)).collect();

        let prev = out.last();
        let redundant = prev.is_some() && (spec.redundant || (cfg.events.is_none() && u_red < cfg.redundancy_rate));
        let class = spec.class.unwrap_or(class);
        let waits = class.optimal_waits();
        let optimal_wait = waits[wait_pick as usize];
        let (topic_id, need_embedding) = if redundant {
            let p = prev.unwrap();
            (p.topic_id, p.need_embedding.clone())
        } else {
            let mut topic = spec.topic.unwrap_or(u_topic);
            if spec.topic.is_none() {
                if let Some(p) = prev {
                    if topic == p.topic_id {
                        topic = (topic + 1) % cfg.n_topics;
                    }
                }
            }
            let v: Vec<f64> = world.prototypes[topic].iter().zip(&noise).map(|(p, n)| p + n).collect();
            (topic, math::normalized(&v).expect("non-zero need"))
        };
        let covered = !cfg.uncovered_topics.contains(&topic_id);
        out.push(UncertaintyEvent {
            position: spec.position,
            topic_id,
            event_class: class,
            need_embedding,
            gold_utility: if redundant || !covered { 0.0 } else { 1.0 },
            redundant,
            optimal_wait,
        });
    }
    out
}

/// Context concentration on event `e`'s need at token `t`, if `t` is inside
/// the event's influence window.
fn concentration(cfg: &SynthConfig, t: usize, e: &UncertaintyEvent) -> Option<f64> {
    let p = e.position as i64;
    let d = t as i64 - p;
    let k_opt = e.optimal_wait.max(1) as i64;
    let window = cfg.lead_window as i64;
    let at_event = cfg.lead_concentration;
    if d < -window {
        return None;
    }
    if d < 0 {
        let x = (d + window) as f64 / window as f64;
        return Some(at_event * x);
    }
    let post = |k: i64| -> f64 {
        if k <= k_opt {
            at_event + (CONC_PEAK - at_event) * k as f64 / k_opt as f64
        } else {
            CONC_PEAK - CONC_FALLOFF * (k - k_opt) as f64
        }
    };
    if d <= MAX_WAIT as i64 {
        return Some(post(d));
    }
    let tail = d - MAX_WAIT as i64;
    if tail > POST_DECAY as i64 {
        return None;
    }
    Some(post(MAX_WAIT as i64) * (1.0 - tail as f64 / POST_DECAY as f64))
}

/// Attention-dispersion bump: rises linearly from `-lead` to a peak at `-9`,
/// holds through `-4` and falls back by `+1`.
fn attention_bump(t: usize, position: usize, lead: usize) -> f64 {
    let d = t as i64 - position as i64;
    let lead = lead as i64;
    if d < -lead || d > 1 {
        0.0
    } else if d < -9 {
        (d + lead) as f64 / (lead - 9) as f64
    } else if d <= -4 {
        1.0
    } else {
        1.0 - 0.2 * (d + 4) as f64
    }
}

/// Precursor strength in [0, 1] for an event with precursor length `lead`.
fn precursor(t: usize, position: usize, lead: usize) -> f64 {
    let d = t as i64 - position as i64;
    let lead = lead as i64;
    if d < -lead || d > 4 {
        0.0
    } else if d <= -2 {
        (d + lead) as f64 / (lead - 2) as f64
    } else if d <= 0 {
        1.0
    } else {
        1.0 - d as f64 / 5.0
    }
}

/// Generate one trace. Pure in `(cfg, seed)`.
pub fn synth_trace(cfg: &SynthConfig, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let world = World::from_config(cfg);
    synth_trace_in(cfg, &world, seed)
}

/// Like [`synth_trace`] with a prebuilt world (must match `cfg`).
pub fn synth_trace_in(cfg: &SynthConfig, world: &World, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let n = cfg.n_tokens;
    let mut sched_rng = math::stream(seed, &[0x5c, 1]);
    let specs = schedule(cfg, &mut sched_rng);
    let mut ev_rng = math::stream(seed, &[0x5c, 2]);
    let events = resolve_events(cfg, world, &specs, &mut ev_rng);

    let mut lead_rng = math::stream(seed, &[0x5c, 3]);
    let leads: Vec<usize> = events
        .iter()
        .map(|_| {
            let j = cfg.precursor_jitter as i64;
            let off = if j > 0 { lead_rng.random_range(-j..=j) } else { 0 };
            (cfg.precursor_lead as i64 + off) as usize
        })
        .collect();

    let decoys = decoys(cfg, &events, seed);

    // entropy: a ramp below theta, two tokens above it, then a decay
    let mut rng = math::stream(seed, &[0x5c, 4]);
    let ceiling = cfg.theta - 0.05;
    let floor_at_event = cfg.theta + 0.05;
    let ramp = |d: i64, scale: f64| -> f64 {
        let j = (cfg.ramp_len as i64 + 1 + d) as f64;
        cfg.entropy_base + scale * (cfg.ramp_top - cfg.entropy_base) * j / cfg.ramp_len as f64
    };
    let mut entropy = vec![0.0; n];
    for (t, h) in entropy.iter_mut().enumerate() {
        let mut level = cfg.entropy_base;
        let mut at_event = false;
        for e in &events {
            let d = t as i64 - e.position as i64;
            if d == 0 {
                at_event = true;
                level = cfg.entropy_peak;
            } else if d == 1 {
                at_event = true;
                level = level.max(0.5 * (cfg.entropy_peak + cfg.theta));
            } else if d < 0 && d >= -(cfg.ramp_len as i64) {
                level = level.max(ramp(d, 1.0));
            } else if d == 2 || d == 3 {
                let frac = if d == 2 { 0.35 } else { 0.12 };
                level = level.max(cfg.entropy_base + (cfg.entropy_peak - cfg.entropy_base) * frac);
            }
        }
        for dc in &decoys {
            let d = t as i64 - dc.position as i64;
            if d <= 0 && d >= -(cfg.ramp_len as i64) {
                level = level.max(ramp(d, dc.amplitude));
            }
        }
        let v = level + cfg.entropy_noise * gauss(&mut rng);
        *h = if at_event { v.max(floor_at_event) } else { v.clamp(0.01, ceiling) };
    }

    // precursor-bearing signals
    let strength: Vec<f64> = (0..n)
        .map(|t| {
            let real = events.iter().zip(&leads).map(|(e, &l)| precursor(t, e.position, l));
            let fake = decoys.iter().map(|d| d.amplitude * precursor(t, d.position, d.lead));
            real.chain(fake).fold(0.0, f64::max)
        })
        .collect();
    let attention_level: Vec<f64> = (0..n)
        .map(|t| {
            let real = events.iter().zip(&leads).map(|(e, &l)| attention_bump(t, e.position, l + 1));
            let fake = decoys.iter().map(|d| d.amplitude * attention_bump(t, d.position, d.lead + 1));
            real.chain(fake).fold(0.0, f64::max)
        })
        .collect();
    let mut rng = math::stream(seed, &[0x5c, 5]);
    let rho = cfg.attention_smoothing;
    let innov = (1.0 - rho * rho).sqrt();
    let mut ar = cfg.attention_noise * gauss(&mut rng);
    let mut complete_prev = true;
    let mut frames = Vec::with_capacity(n);
    let mut phrase_complete = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            ar = rho * ar + innov * cfg.attention_noise * gauss(&mut rng);
        }
        let s = strength[t];
        let attention = (cfg.attention_base + cfg.attention_gain * attention_level[t] + ar).max(0.0);
        let value_delta = (0.1 * gauss(&mut rng)).abs() + 0.5 * s;
        let near = |p: usize| t + 8 >= p && t + 2 <= p;
        let hedge_p = if events.iter().any(|e| near(e.position)) || decoys.iter().any(|d| near(d.position)) {
            cfg.hedge_elevated
        } else {
            cfg.hedge_base
        };
        let hedge = rng.random::<f64>() < hedge_p;
        let complete = if complete_prev {
            rng.random::<f64>() < cfg.complete_rate
        } else {
            rng.random::<f64>() < 0.8
        };
        complete_prev = complete;
        let margin_mean = if complete { 0.6 } else { 0.3 };
        let topk_margin = (margin_mean + 0.08 * gauss(&mut rng)).clamp(0.0, 1.0);
        let hidden_summary: Vec<f64> = world.hidden_dir.iter().map(|d| 0.5 * gauss(&mut rng) + 0.8 * s * d).collect();
        frames.push(SignalFrame {
            token_index: t,
            entropy: entropy[t],
            entropy_delta: if t == 0 { 0.0 } else { entropy[t] - entropy[t - 1] },
            attention_entropy: attention,
            value_norm_delta: value_delta,
            topk_margin,
            hedge_flag: hedge,
            hidden_summary,
        });
        phrase_complete.push(complete);
    }

    // an unfinished phrase at the crossing needs the longer of the class's waits
    let mut events = events;
    for e in &mut events {
        e.optimal_wait = e.event_class.optimal_waits()[!phrase_complete[e.position] as usize];
    }
    let context_embeddings = context_track(cfg, world, &events, seed);

    let trace = Trace {
        id: seed,
        seed,
        theta: cfg.theta,
        frames,
        events,
        context_embeddings,
        phrase_complete,
        suppressed_spans: cfg.suppressed_spans.clone(),
    };
    debug_assert!(trace.validate().is_ok());
    Ok(trace)
}

fn context_track(cfg: &SynthConfig, world: &World, events: &[UncertaintyEvent], seed: u64) -> Vec<Vec<f64>> {
    let n = cfg.n_tokens;
    let dim = cfg.emb_dim;
    let mut rng = math::stream(seed, &[0x5c, 6]);
    let rho = if cfg.noiseless { 1.0 } else { cfg.context_drift };
    let innov = (1.0 - rho * rho).sqrt();
    let noise_scale = if cfg.noiseless { 0.0 } else { cfg.context_noise };
    let mut diffuse = math::random_unit(&mut rng, dim);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            let step = math::random_unit(&mut rng, dim);
            let v: Vec<f64> = diffuse.iter().zip(&step).map(|(d, s)| rho * d + innov * s).collect();
            diffuse = math::normalized(&v).unwrap_or(diffuse);
        }
        let noise: Vec<f64> = (0..dim).map(|_| noise_scale * gauss(&mut rng)).collect();

        let focus = events
            .iter()
            .filter_map(|e| concentration(cfg, t, e).map(|a| (a, e)))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let mut v = match focus {
            Some((a, e)) if a > 0.0 => {
                let need = &e.need_embedding;
                let back = math::normalized(&math::reject(&diffuse, need)).unwrap_or_else(|| diffuse.clone());
                let cls = &world.class_dirs[e.event_class.index()];
                let cls = math::normalized(&math::reject(cls, need)).unwrap_or_else(|| cls.clone());
                let mut v = vec![0.0; dim];
                math::axpy(&mut v, a, need);
                math::axpy(&mut v, cfg.class_signature * a, &cls);
                math::axpy(&mut v, 1.0 - a, &back);
                v
            }
            _ => diffuse.clone(),
        };
        math::axpy(&mut v, 1.0, &noise);
        out.push(math::normalized(&v).expect("non-zero context"));
    }
    out
}

/// Generate `count` traces with seeds `base_seed + i`.
pub fn synth_batch(cfg: &SynthConfig, base_seed: u64, count: usize, exec: crate::parallel::Exec) -> Result<Vec<Trace>> {
    cfg.validate()?;
    let world = World::from_config(cfg);
    crate::parallel::map_range(exec, count, |i| synth_trace_in(cfg, &world, base_seed + i as u64))
        .into_iter()
        .collect()
}

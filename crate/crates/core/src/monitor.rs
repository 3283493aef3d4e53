//! Readiness checks run after a retrieval is predicted: how long to wait for
//! context to accumulate, whether cached docs already cover the need, and
//! whether the current phrase is complete enough to query on.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, sigmoid};
use crate::params_io::{Blob, Kind};
use crate::synth::{argmax_first, LabeledInstance, WAITS};
use crate::synth::{EventClass, SignalFrame, Trace};

/// Longest base wait the context score may choose.
pub const MAX_WAIT: usize = WAITS - 1;
/// One-hot slots for tokens since trigger; covers the base wait plus two extensions.
pub const SINCE_SLOTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub sufficiency_skip: f64,
    pub clarity_ready: f64,
    pub max_extensions: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            sufficiency_skip: 0.8,
            clarity_ready: 0.7,
            max_extensions: 2,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sufficiency_skip", self.sufficiency_skip), ("clarity_ready", self.clarity_ready)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("monitor.{name} must lie in [0, 1]")));
            }
        }
        if MAX_WAIT + self.max_extensions >= SINCE_SLOTS {
            return Err(Error::Config(format!(
                "monitor.max_extensions must be at most {}",
                SINCE_SLOTS - 1 - MAX_WAIT
            )));
        }
        Ok(())
    }
}

pub fn feature_dim(emb_dim: usize) -> usize {
    emb_dim + SINCE_SLOTS + SignalFrame::SCALARS
}

/// `e_c ⊕ one-hot(tokens since trigger) ⊕ newest frame scalars`.
pub fn context_features(e_c: &[f64], since_trigger: usize, frame: &SignalFrame) -> Vec<f64> {
    let mut h = Vec::with_capacity(feature_dim(e_c.len()));
    h.extend_from_slice(e_c);
    let mut slots = [0.0; SINCE_SLOTS];
    slots[since_trigger.min(SINCE_SLOTS - 1)] = 1.0;
    h.extend_from_slice(&slots);
    h.extend_from_slice(&frame.scalars());
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    pub token_index: usize,
    pub tokens_since_trigger: usize,
    pub e_c: Vec<f64>,
    pub h_c: Vec<f64>,
    pub pending_request: Option<u64>,
}

impl ContextState {
    pub fn at(trace: &Trace, t: usize, since_trigger: usize) -> Result<Self> {
        if t >= trace.len() {
            return Err(Error::Invalid(format!("context position {t} outside trace")));
        }
        if since_trigger >= SINCE_SLOTS {
            return Err(Error::Invalid(format!("tokens since trigger {since_trigger} exceeds wait cap")));
        }
        let e_c = trace.context_embeddings[t].clone();
        let h_c = context_features(&e_c, since_trigger, &trace.frames[t]);
        Ok(ContextState {
            token_index: t,
            tokens_since_trigger: since_trigger,
            e_c,
            h_c,
            pending_request: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorParams {
    d_emb: usize,
    d_h: usize,
    /// cs_w (WAITS × d_h) | cs_b (WAITS) | suff_w (d_emb + 1) | suff_b | cl_w (d_h) | cl_b
    weights: Vec<f64>,
}

struct Layout {
    cs_w: usize,
    cs_b: usize,
    suff_w: usize,
    suff_b: usize,
    cl_w: usize,
    cl_b: usize,
    len: usize,
}

fn layout(d_emb: usize, d_h: usize) -> Layout {
    let cs_w = 0;
    let cs_b = cs_w + WAITS * d_h;
    let suff_w = cs_b + WAITS;
    let suff_b = suff_w + d_emb + 1;
    let cl_w = suff_b + 1;
    let cl_b = cl_w + d_h;
    Layout {
        cs_w,
        cs_b,
        suff_w,
        suff_b,
        cl_w,
        cl_b,
        len: cl_b + 1,
    }
}

impl MonitorParams {
    pub fn zeros(emb_dim: usize) -> Self {
        let d_h = feature_dim(emb_dim);
        MonitorParams {
            d_emb: emb_dim,
            d_h,
            weights: vec![0.0; layout(emb_dim, d_h).len],
        }
    }

    pub fn emb_dim(&self) -> usize {
        self.d_emb
    }

    fn l(&self) -> Layout {
        layout(self.d_emb, self.d_h)
    }

    /// Sufficiency weight on the max-cosine input.
    pub fn sufficiency_m_weight(&self) -> f64 {
        self.weights[self.l().suff_b - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn to_blob(&self) -> Blob {
        Blob {
            kind: Kind::Monitor,
            dims: vec![self.d_emb as u32, self.d_h as u32],
            values: self.weights.clone(),
        }
    }

    pub fn from_blob(blob: Blob) -> Result<Self> {
        let blob = blob.expect_kind(Kind::Monitor)?;
        let [d_emb, d_h] = blob.dims[..] else {
            return Err(Error::Format("monitor header needs 2 dims".into()));
        };
        let (d_emb, d_h) = (d_emb as usize, d_h as usize);
        if d_h != feature_dim(d_emb) || blob.values.len() != layout(d_emb, d_h).len {
            return Err(Error::Format("monitor value count disagrees with dims".into()));
        }
        if blob.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("monitor parameters"));
        }
        Ok(MonitorParams {
            d_emb,
            d_h,
            weights: blob.values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(Blob::load(path)?)
    }

    fn cs_logits(&self, h: &[f64]) -> [f64; WAITS] {
        let l = self.l();
        std::array::from_fn(|k| {
            let row = &self.weights[l.cs_w + k * self.d_h..l.cs_w + (k + 1) * self.d_h];
            math::dot(row, h) + self.weights[l.cs_b + k]
        })
    }

    fn suff_logit(&self, e_c: &[f64], m: f64) -> f64 {
        let l = self.l();
        let w = &self.weights[l.suff_w..l.suff_b];
        math::dot(&w[..self.d_emb], e_c) + w[self.d_emb] * m + self.weights[l.suff_b]
    }

    fn clarity_logit(&self, h: &[f64]) -> f64 {
        let l = self.l();
        math::dot(&self.weights[l.cl_w..l.cl_b], h) + self.weights[l.cl_b]
    }
}

/// Predicted query quality for waits 0..=5 and the best wait, ties to the smaller k.
pub fn context_score(params: &MonitorParams, state: &ContextState) -> ([f64; WAITS], usize) {
    let q = params.cs_logits(&state.h_c).map(sigmoid);
    let k = argmax_first(&q);
    (q, k)
}

/// Max cosine between `e_c` and the cached docs, or −1 for an empty cache.
pub fn cache_max_cos(e_c: &[f64], cached: &[&[f64]]) -> f64 {
    cached
        .iter()
        .map(|d| math::cosine(e_c, d))
        .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
        .unwrap_or(-1.0)
}

pub fn sufficiency(params: &MonitorParams, e_c: &[f64], cached: &[&[f64]]) -> Result<f64> {
    sufficiency_with_m(params, e_c, cache_max_cos(e_c, cached))
}

pub fn sufficiency_with_m(params: &MonitorParams, e_c: &[f64], m: f64) -> Result<f64> {
    if e_c.len() != params.d_emb {
        return Err(Error::Invalid("context embedding dimension mismatch".into()));
    }
    if !math::is_unit(e_c, 1e-6) {
        return Err(Error::Invalid(format!("context embedding norm {} is not 1", math::norm(e_c))));
    }
    Ok(sigmoid(params.suff_logit(e_c, m)))
}

pub fn clarity(params: &MonitorParams, h_c: &[f64]) -> f64 {
    sigmoid(params.clarity_logit(h_c))
}

/// Whether the trigger may be scheduled now. Low clarity earns one more token
/// per check until the extension budget runs out.
pub fn clarity_ready(params: &MonitorParams, cfg: &MonitorConfig, h_c: &[f64], extensions_used: usize) -> bool {
    extensions_used >= cfg.max_extensions || clarity(params, h_c) >= cfg.clarity_ready
}

/// One supervised example for all three heads, taken at a labeled crossing.
#[derive(Debug, Clone)]
pub struct MonitorInstance {
    pub trace_id: u64,
    pub position: usize,
    pub event_class: EventClass,
    pub h_trigger: Vec<f64>,
    pub wait_qualities: Option<[f64; WAITS]>,
    pub e_c: Vec<f64>,
    pub cache_max_cos: f64,
    pub sufficient: bool,
    /// Context features at the chosen wait, where clarity is checked.
    pub h_clarity: Vec<f64>,
    pub clarity_target: f64,
}

pub fn monitor_instances(trace: &Trace, labeled: &[LabeledInstance]) -> Result<Vec<MonitorInstance>> {
    labeled
        .iter()
        .map(|li| {
            let at = ContextState::at(trace, li.position, 0)?;
            let k = li.best_wait().unwrap_or(0);
            let tc = (li.position + k).min(trace.len() - 1);
            let clar = ContextState::at(trace, tc, tc - li.position)?;
            Ok(MonitorInstance {
                trace_id: trace.id,
                position: li.position,
                event_class: li.event_class,
                h_trigger: at.h_c,
                wait_qualities: li.wait_qualities,
                e_c: at.e_c,
                cache_max_cos: li.cache_max_cos,
                sufficient: li.sufficiency_label,
                h_clarity: clar.h_c,
                clarity_target: li.clarity_score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Wait-quality regression weight.
    pub beta: f64,
    /// Sufficiency weight.
    pub gamma: f64,
    /// Clarity weight.
    pub delta: f64,
}

impl Default for MonitorTrainConfig {
    fn default() -> Self {
        MonitorTrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            epochs: 40,
            seed: 1,
            beta: 0.5,
            gamma: 0.5,
            delta: 0.3,
        }
    }
}

/// Per-head losses averaged over the instances.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MonitorLoss {
    pub wait_mse: f64,
    pub sufficiency_bce: f64,
    pub clarity_mse: f64,
}

impl MonitorLoss {
    pub fn joint(&self, cfg: &MonitorTrainConfig) -> f64 {
        cfg.beta * self.wait_mse + cfg.gamma * self.sufficiency_bce + cfg.delta * self.clarity_mse
    }
}

pub fn monitor_loss(params: &MonitorParams, data: &[MonitorInstance]) -> MonitorLoss {
    let mut loss = MonitorLoss::default();
    let mut n_wait = 0usize;
    for d in data {
        if let Some(q) = d.wait_qualities {
            let p = params.cs_logits(&d.h_trigger).map(sigmoid);
            loss.wait_mse += p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / WAITS as f64;
            n_wait += 1;
        }
        loss.sufficiency_bce += math::bce_with_logit(params.suff_logit(&d.e_c, d.cache_max_cos), d.sufficient as u8 as f64);
        loss.clarity_mse += (sigmoid(params.clarity_logit(&d.h_clarity)) - d.clarity_target).powi(2);
    }
    let n = data.len().max(1) as f64;
    loss.wait_mse /= n_wait.max(1) as f64;
    loss.sufficiency_bce /= n;
    loss.clarity_mse /= n;
    loss
}

fn accumulate_grad(p: &MonitorParams, d: &MonitorInstance, cfg: &MonitorTrainConfig, scale: f64, g: &mut [f64]) {
    let l = p.l();
    if let (Some(q), true) = (d.wait_qualities, cfg.beta != 0.0) {
        let s = p.cs_logits(&d.h_trigger).map(sigmoid);
        for k in 0..WAITS {
            let da = scale * cfg.beta * 2.0 * (s[k] - q[k]) * s[k] * (1.0 - s[k]) / WAITS as f64;
            math::axpy(&mut g[l.cs_w + k * p.d_h..l.cs_w + (k + 1) * p.d_h], da, &d.h_trigger);
            g[l.cs_b + k] += da;
        }
    }
    if cfg.gamma != 0.0 {
        let da = scale * cfg.gamma * (sigmoid(p.suff_logit(&d.e_c, d.cache_max_cos)) - d.sufficient as u8 as f64);
        math::axpy(&mut g[l.suff_w..l.suff_w + p.d_emb], da, &d.e_c);
        g[l.suff_b - 1] += da * d.cache_max_cos;
        g[l.suff_b] += da;
    }
    if cfg.delta != 0.0 {
        let s = sigmoid(p.clarity_logit(&d.h_clarity));
        let da = scale * cfg.delta * 2.0 * (s - d.clarity_target) * s * (1.0 - s);
        math::axpy(&mut g[l.cl_w..l.cl_b], da, &d.h_clarity);
        g[l.cl_b] += da;
    }
}

/// Joint minibatch training of the three heads from zero weights.
pub fn train_monitor(data: &[MonitorInstance], cfg: &MonitorTrainConfig) -> Result<MonitorParams> {
    let first = data.first().ok_or(Error::Empty("monitor training set"))?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config("monitor training needs batch, lr > 0 and momentum in [0,1)".into()));
    }
    let mut p = MonitorParams::zeros(first.e_c.len());
    for d in data {
        let finite = d.h_trigger.iter().chain(&d.h_clarity).chain(&d.e_c).all(|v| v.is_finite());
        if !finite || d.h_trigger.len() != p.d_h || d.e_c.len() != p.d_emb {
            return Err(Error::Invalid(format!("malformed monitor instance at position {}", d.position)));
        }
    }
    let mut velocity = vec![0.0; p.weights.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut math::stream(cfg.seed, &[0x40a1, epoch as u64]));
        for idx in order.chunks(cfg.batch) {
            let mut g = vec![0.0; p.weights.len()];
            let scale = 1.0 / idx.len() as f64;
            for &i in idx {
                accumulate_grad(&p, &data[i], cfg, scale, &mut g);
            }
            for ((w, v), g) in p.weights.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
        }
    }
    if p.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("monitor parameters after training"));
    }
    Ok(p)
}

/// Single BCE step on the sufficiency head toward `label`.
pub fn sufficiency_step(params: &mut MonitorParams, e_c: &[f64], m: f64, label: bool, lr: f64) {
    let l = params.l();
    let da = lr * (sigmoid(params.suff_logit(e_c, m)) - label as u8 as f64);
    for (w, x) in params.weights[l.suff_w..l.suff_w + params.d_emb].iter_mut().zip(e_c) {
        *w -= da * x;
    }
    params.weights[l.suff_b - 1] -= da * m;
    params.weights[l.suff_b] -= da;
}

/// Single squared-error step on the clarity head toward `target`.
pub fn clarity_step(params: &mut MonitorParams, h_c: &[f64], target: f64, lr: f64) {
    let l = params.l();
    let s = sigmoid(params.clarity_logit(h_c));
    let da = lr * 2.0 * (s - target) * s * (1.0 - s);
    for (w, x) in params.weights[l.cl_w..l.cl_b].iter_mut().zip(h_c) {
        *w -= da * x;
    }
    params.weights[l.cl_b] -= da;
}

/// Largest relative error between the analytic joint-loss gradient and central
/// differences with step `step` over `coords` random weight coordinates.
pub fn grad_check(params: &MonitorParams, data: &[MonitorInstance], cfg: &MonitorTrainConfig, coords: usize, step: f64, seed: u64) -> f64 {
    let mut g = vec![0.0; params.weights.len()];
    for d in data {
        accumulate_grad(params, d, cfg, 1.0 / data.len() as f64, &mut g);
    }
    // monitor_loss averages the wait term over labeled instances only.
    let n_wait = data.iter().filter(|d| d.wait_qualities.is_some()).count() as f64;
    let rescale = n_wait / data.len().max(1) as f64;
    let f = |l: MonitorLoss| cfg.beta * l.wait_mse * rescale + cfg.gamma * l.sufficiency_bce + cfg.delta * l.clarity_mse;
    let mut rng = math::stream(seed, &[0x4c9]);
    let mut q = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..q.weights.len());
        let w0 = q.weights[k];
        q.weights[k] = w0 + step;
        let up = f(monitor_loss(&q, data));
        q.weights[k] = w0 - step;
        let down = f(monitor_loss(&q, data));
        q.weights[k] = w0;
        worst = worst.max(math::rel_err(g[k], (up - down) / (2.0 * step)));
    }
    worst
}

/// Random small weights, for property tests and gradient checks.
pub fn random_params(emb_dim: usize, seed: u64) -> MonitorParams {
    let mut p = MonitorParams::zeros(emb_dim);
    let mut rng = math::stream(seed, &[0x4a7]);
    for w in &mut p.weights {
        *w = rng.random_range(-0.3..0.3);
    }
    p
}

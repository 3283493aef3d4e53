//! Retrieval predictor: a windowed two-layer encoder over recent signal
//! frames, concatenated with output-distribution stats and squashed to a
//! probability that entropy first crosses θ within the next Δ tokens.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, sigmoid};
use crate::parallel::{self, Exec};
use crate::params_io::{Blob, Kind};
use crate::synth::{SignalFrame, Trace};

pub const WINDOW: usize = 16;
/// Output stats fed straight to the head: entropy, top-k margin, entropy delta.
pub const N_OUT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub theta: f64,
    pub horizon: usize,
    pub tau_rag: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            theta: 2.5,
            horizon: 10,
            tau_rag: 0.65,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("prediction.horizon must be >= 1".into()));
        }
        if !(self.tau_rag > 0.0 && self.tau_rag < 1.0) {
            return Err(Error::Config("prediction.tau_rag must lie in (0, 1)".into()));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config("prediction.theta must be positive".into()));
        }
        Ok(())
    }
}

/// Flattened input window plus the raw output stats of the newest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub features: Vec<f64>,
    pub o: [f64; N_OUT],
}

pub fn frame_features(hidden_dim: usize) -> usize {
    SignalFrame::SCALARS + hidden_dim
}

pub fn output_stats(f: &SignalFrame) -> [f64; N_OUT] {
    [f.entropy, f.topk_margin, f.entropy_delta]
}

/// Window ending at frame `t` (inclusive). Positions before the trace start
/// are filled with the neutral frame.
pub fn window_at(trace: &Trace, t: usize) -> Result<Window> {
    if t >= trace.len() {
        return Err(Error::Invalid(format!("window end {t} outside trace of length {}", trace.len())));
    }
    let hd = trace.frames[0].hidden_summary.len();
    let neutral = SignalFrame::neutral(hd);
    let frames: Vec<&SignalFrame> = (0..WINDOW)
        .map(|i| {
            let back = WINDOW - 1 - i;
            if back > t {
                &neutral
            } else {
                &trace.frames[t - back]
            }
        })
        .collect();
    Ok(window_from_frames(&frames))
}

pub fn window_from_frames(frames: &[&SignalFrame]) -> Window {
    debug_assert_eq!(frames.len(), WINDOW);
    let mut features = Vec::with_capacity(WINDOW * frame_features(frames[0].hidden_summary.len()));
    for f in frames {
        features.extend_from_slice(&f.scalars());
        features.extend_from_slice(&f.hidden_summary);
    }
    Window {
        features,
        o: output_stats(frames[WINDOW - 1]),
    }
}

/// True iff entropy first crosses `theta` from below somewhere in `[t+1, t+Δ]`.
pub fn make_label(trace: &Trace, t: usize, theta: f64, horizon: usize) -> Result<bool> {
    if horizon == 0 || t + horizon >= trace.len() {
        return Err(Error::Invalid(format!(
            "label position {t} with horizon {horizon} exceeds trace length {}",
            trace.len()
        )));
    }
    let h = |i: usize| trace.frames[i].entropy;
    Ok((t + 1..=t + horizon).any(|tau| h(tau) >= theta && h(tau - 1) < theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    n_in: usize,
    d_z: usize,
    /// W1 | b1 | W2 | b2 | w_p | b_p, row-major.
    weights: Vec<f64>,
    in_shift: Vec<f64>,
    in_scale: Vec<f64>,
    o_shift: [f64; N_OUT],
    o_scale: [f64; N_OUT],
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    len: usize,
}

fn layout(n_in: usize, d_z: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + d_z * n_in;
    let w2 = b1 + d_z;
    let b2 = w2 + d_z * d_z;
    let wp = b2 + d_z;
    let bp = wp + d_z + N_OUT;
    Layout {
        w1,
        b1,
        w2,
        b2,
        wp,
        bp,
        len: bp + 1,
    }
}

impl PredictorParams {
    /// All weights zero, identity input scaling.
    pub fn zeros(n_in: usize, d_z: usize) -> Self {
        PredictorParams {
            n_in,
            d_z,
            weights: vec![0.0; layout(n_in, d_z).len],
            in_shift: vec![0.0; n_in],
            in_scale: vec![1.0; n_in],
            o_shift: [0.0; N_OUT],
            o_scale: [1.0; N_OUT],
        }
    }

    /// Encoder drawn from a scaled uniform, head zero.
    pub fn init(n_in: usize, d_z: usize, seed: u64) -> Self {
        let mut p = Self::zeros(n_in, d_z);
        let l = layout(n_in, d_z);
        let mut rng = math::stream(seed, &[0x9e_d1]);
        let a1 = (6.0 / (n_in + d_z) as f64).sqrt();
        for w in &mut p.weights[l.w1..l.b1] {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (2 * d_z) as f64).sqrt();
        for w in &mut p.weights[l.w2..l.b2] {
            *w = rng.random_range(-a2..a2);
        }
        p
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Head weights over `[z; o]`.
    pub fn head(&self) -> &[f64] {
        let l = layout(self.n_in, self.d_z);
        &self.weights[l.wp..l.bp]
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        let l = layout(self.n_in, self.d_z);
        &mut self.weights[l.wp..l.bp]
    }

    pub fn set_bias(&mut self, b: f64) {
        let l = layout(self.n_in, self.d_z);
        self.weights[l.bp] = b;
    }

    fn fit_scaling(&mut self, data: &[Instance]) {
        let n = data.len() as f64;
        for j in 0..self.n_in {
            let m = data.iter().map(|d| d.window.features[j]).sum::<f64>() / n;
            let v = data.iter().map(|d| (d.window.features[j] - m).powi(2)).sum::<f64>() / n;
            self.in_shift[j] = m;
            self.in_scale[j] = 1.0 / v.sqrt().max(1e-3);
        }
        for j in 0..N_OUT {
            let m = data.iter().map(|d| d.window.o[j]).sum::<f64>() / n;
            let v = data.iter().map(|d| (d.window.o[j] - m).powi(2)).sum::<f64>() / n;
            self.o_shift[j] = m;
            self.o_scale[j] = 1.0 / v.sqrt().max(1e-3);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = layout(self.n_in, self.d_z);
        if self.weights.len() != l.len || self.in_shift.len() != self.n_in || self.in_scale.len() != self.n_in {
            return Err(Error::Format("predictor parameter lengths disagree with dims".into()));
        }
        let all = self
            .weights
            .iter()
            .chain(&self.in_shift)
            .chain(&self.in_scale)
            .chain(&self.o_shift)
            .chain(&self.o_scale);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictor parameters"));
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Blob {
        let mut values = self.weights.clone();
        values.extend_from_slice(&self.in_shift);
        values.extend_from_slice(&self.in_scale);
        values.extend_from_slice(&self.o_shift);
        values.extend_from_slice(&self.o_scale);
        Blob {
            kind: Kind::Predictor,
            dims: vec![self.n_in as u32, self.d_z as u32, N_OUT as u32],
            values,
        }
    }

    pub fn from_blob(blob: Blob) -> Result<Self> {
        let blob = blob.expect_kind(Kind::Predictor)?;
        let [n_in, d_z, n_o] = blob.dims[..] else {
            return Err(Error::Format("predictor header needs 3 dims".into()));
        };
        if n_o as usize != N_OUT {
            return Err(Error::Format(format!("predictor output stats must be {N_OUT}, got {n_o}")));
        }
        let (n_in, d_z) = (n_in as usize, d_z as usize);
        let wl = layout(n_in, d_z).len;
        if blob.values.len() != wl + 2 * n_in + 2 * N_OUT {
            return Err(Error::Format("predictor value count disagrees with dims".into()));
        }
        let v = &blob.values;
        let mut at = wl;
        let mut take = |n: usize| {
            let s = v[at..at + n].to_vec();
            at += n;
            s
        };
        let weights = v[..wl].to_vec();
        let in_shift = take(n_in);
        let in_scale = take(n_in);
        let o_shift = take(N_OUT).try_into().unwrap();
        let o_scale = take(N_OUT).try_into().unwrap();
        let p = PredictorParams {
            n_in,
            d_z,
            weights,
            in_shift,
            in_scale,
            o_shift,
            o_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(Blob::load(path)?)
    }
}

struct Forward {
    x: Vec<f64>,
    h1: Vec<f64>,
    z: Vec<f64>,
    o: [f64; N_OUT],
    logit: f64,
}

fn forward(p: &PredictorParams, w: &Window) -> Forward {
    let l = layout(p.n_in, p.d_z);
    let x: Vec<f64> = w
        .features
        .iter()
        .zip(p.in_shift.iter().zip(&p.in_scale))
        .map(|(v, (s, k))| (v - s) * k)
        .collect();
    let h1: Vec<f64> = (0..p.d_z)
        .map(|i| {
            let row = &p.weights[l.w1 + i * p.n_in..l.w1 + (i + 1) * p.n_in];
            (math::dot(row, &x) + p.weights[l.b1 + i]).tanh()
        })
        .collect();
    let z: Vec<f64> = (0..p.d_z)
        .map(|i| {
            let row = &p.weights[l.w2 + i * p.d_z..l.w2 + (i + 1) * p.d_z];
            (math::dot(row, &h1) + p.weights[l.b2 + i]).tanh()
        })
        .collect();
    let o: [f64; N_OUT] = std::array::from_fn(|j| (w.o[j] - p.o_shift[j]) * p.o_scale[j]);
    let head = &p.weights[l.wp..l.bp];
    let logit = math::dot(&head[..p.d_z], &z) + math::dot(&head[p.d_z..], &o) + p.weights[l.bp];
    Forward { x, h1, z, o, logit }
}

/// Accumulate `scale * dBCE/dweights` for one instance into `grad`; returns the loss.
fn backward(p: &PredictorParams, w: &Window, label: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let l = layout(p.n_in, p.d_z);
    let f = forward(p, w);
    let dl = (sigmoid(f.logit) - label) * scale;
    let head = &p.weights[l.wp..l.bp];
    for i in 0..p.d_z {
        grad[l.wp + i] += dl * f.z[i];
    }
    for j in 0..N_OUT {
        grad[l.wp + p.d_z + j] += dl * f.o[j];
    }
    grad[l.bp] += dl;
    let da2: Vec<f64> = (0..p.d_z).map(|i| dl * head[i] * (1.0 - f.z[i] * f.z[i])).collect();
    let mut dh1 = vec![0.0; p.d_z];
    for i in 0..p.d_z {
        let row = l.w2 + i * p.d_z;
        for k in 0..p.d_z {
            grad[row + k] += da2[i] * f.h1[k];
            dh1[k] += da2[i] * p.weights[row + k];
        }
        grad[l.b2 + i] += da2[i];
    }
    for i in 0..p.d_z {
        let da1 = dh1[i] * (1.0 - f.h1[i] * f.h1[i]);
        if da1 != 0.0 {
            math::axpy(&mut grad[l.w1 + i * p.n_in..l.w1 + (i + 1) * p.n_in], da1, &f.x);
        }
        grad[l.b1 + i] += da1;
    }
    math::bce_with_logit(f.logit, label)
}

fn check_window(p: &PredictorParams, w: &Window) -> Result<()> {
    if w.features.len() != p.n_in {
        return Err(Error::Invalid(format!(
            "window has {} features, predictor expects {}",
            w.features.len(),
            p.n_in
        )));
    }
    if w.features.iter().chain(&w.o).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predictor input"));
    }
    Ok(())
}

pub fn predict(params: &PredictorParams, window: &Window) -> Result<f64> {
    check_window(params, window)?;
    Ok(sigmoid(forward(params, window).logit))
}

/// Predict from exactly [`WINDOW`] frames, oldest first.
pub fn predict_frames(params: &PredictorParams, frames: &[&SignalFrame]) -> Result<f64> {
    if frames.len() != WINDOW {
        return Err(Error::Invalid(format!("predictor needs {WINDOW} frames, got {}", frames.len())));
    }
    predict(params, &window_from_frames(frames))
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub trace_id: u64,
    pub position: usize,
    pub window: Window,
    pub label: bool,
}

/// Windows from every labelable position, keeping all positives and an equal
/// number of negatives drawn without replacement.
pub fn build_instances(traces: &[Trace], cfg: &PredictionConfig, seed: u64, exec: Exec) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let per_trace = parallel::map(exec, traces, |tr| -> Result<Vec<Instance>> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for t in 0..tr.len().saturating_sub(cfg.horizon) {
            if make_label(tr, t, cfg.theta, cfg.horizon)? {
                pos.push(t);
            } else {
                neg.push(t);
            }
        }
        let mut rng = math::stream(seed, &[0x1ab3, tr.id]);
        neg.shuffle(&mut rng);
        neg.truncate(pos.len());
        let mut out = Vec::with_capacity(2 * pos.len());
        for (ts, label) in [(pos, true), (neg, false)] {
            for t in ts {
                out.push(Instance {
                    trace_id: tr.id,
                    position: t,
                    window: window_at(tr, t)?,
                    label,
                });
            }
        }
        out.sort_by_key(|i| i.position);
        Ok(out)
    });
    let mut all = Vec::new();
    for r in per_trace {
        all.extend(r?);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub d_z: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            momentum: 0.9,
            batch: 32,
            epochs: 40,
            d_z: 32,
            seed: 1,
        }
    }
}

fn class_counts(labels: impl Iterator<Item = bool>) -> (usize, usize) {
    labels.fold((0, 0), |(p, n), l| if l { (p + 1, n) } else { (p, n + 1) })
}

/// Minibatch gradient split into fixed chunks so the summation order, and
/// therefore the result, does not depend on `exec`.
fn batch_gradient(p: &PredictorParams, batch: &[&Instance], exec: Exec) -> Vec<f64> {
    const CHUNK: usize = 8;
    let n_chunks = batch.len().div_ceil(CHUNK);
    let scale = 1.0 / batch.len() as f64;
    let parts = parallel::map_range(exec, n_chunks, |c| {
        let mut g = vec![0.0; p.weights.len()];
        for inst in &batch[c * CHUNK..((c + 1) * CHUNK).min(batch.len())] {
            backward(p, &inst.window, inst.label as u8 as f64, scale, &mut g);
        }
        g
    });
    let mut iter = parts.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in total.iter_mut().zip(g) {
            *a += b;
        }
    }
    total
}

pub fn train_supervised(instances: &[Instance], cfg: &TrainConfig, exec: Exec) -> Result<PredictorParams> {
    let (pos, neg) = class_counts(instances.iter().map(|i| i.label));
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    if cfg.batch == 0 || cfg.d_z == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(
            "predictor training needs batch, d_z, lr > 0 and momentum in [0,1)".into(),
        ));
    }
    for inst in instances {
        if inst.window.features.iter().chain(&inst.window.o).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictor training input"));
        }
    }
    let n_in = instances[0].window.features.len();
    let mut p = PredictorParams::init(n_in, cfg.d_z, cfg.seed);
    p.fit_scaling(instances);
    let mut velocity = vec![0.0; p.weights.len()];
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = math::stream(cfg.seed, &[0x0e90c, epoch as u64]);
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &instances[i]).collect();
            let g = batch_gradient(&p, &batch, exec);
            for ((w, v), g) in p.weights.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
        }
    }
    p.validate()?;
    Ok(p)
}

/// One plain gradient step on a single labeled window, used for online pseudo-labels.
pub fn sgd_step(params: &mut PredictorParams, window: &Window, label: bool, lr: f64) -> Result<()> {
    check_window(params, window)?;
    let mut g = vec![0.0; params.weights.len()];
    backward(params, window, label as u8 as f64, 1.0, &mut g);
    for (w, g) in params.weights.iter_mut().zip(g) {
        *w -= lr * g;
    }
    Ok(())
}

pub fn predict_all(params: &PredictorParams, instances: &[Instance], exec: Exec) -> Result<Vec<f64>> {
    parallel::map(exec, instances, |i| predict(params, &i.window)).into_iter().collect()
}

/// Mean BCE of `params` over `instances`.
pub fn mean_bce(params: &PredictorParams, instances: &[Instance], exec: Exec) -> Result<f64> {
    let losses = parallel::map(exec, instances, |i| -> Result<f64> {
        check_window(params, &i.window)?;
        Ok(math::bce_with_logit(forward(params, &i.window).logit, i.label as u8 as f64))
    });
    let v: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(math::mean(&v))
}

/// Area under the ROC curve via average ranks; ties contribute one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc score"));
    }
    let (pos, neg) = class_counts(labels.iter().copied());
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, counted in half-units to stay exact.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let p_here = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * p_here;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R_pos - P(P+1)/2 ; doubled to avoid fractions.
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Baseline that scores each window by the current token's entropy alone.
pub fn entropy_only_scores(instances: &[Instance]) -> Vec<f64> {
    instances.iter().map(|i| i.window.o[0]).collect()
}

pub fn labels(instances: &[Instance]) -> Vec<bool> {
    instances.iter().map(|i| i.label).collect()
}

/// Largest relative error between analytic and central-difference gradients
/// over `coords` random weight coordinates.
pub fn grad_check(params: &PredictorParams, instances: &[Instance], coords: usize, step: f64, seed: u64) -> f64 {
    let batch: Vec<&Instance> = instances.iter().collect();
    let g = batch_gradient(params, &batch, Exec::Sequential);
    let loss = |p: &PredictorParams| {
        instances
            .iter()
            .map(|i| math::bce_with_logit(forward(p, &i.window).logit, i.label as u8 as f64))
            .sum::<f64>()
            / instances.len() as f64
    };
    let mut rng = math::stream(seed, &[0x96ad]);
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..p.weights.len());
        let w0 = p.weights[k];
        p.weights[k] = w0 + step;
        let up = loss(&p);
        p.weights[k] = w0 - step;
        let down = loss(&p);
        p.weights[k] = w0;
        worst = worst.max(math::rel_err(g[k], (up - down) / (2.0 * step)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_trace, EventSpec, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn one_event() -> Trace {
        let cfg = SynthConfig {
            n_tokens: 64,
            events: Some(vec![EventSpec::at(20)]),
            ..SynthConfig::default()
        };
        synth_trace(&cfg, 7).unwrap()
    }

    fn small_set(seed: u64) -> Vec<Instance> {
        let cfg = SynthConfig {
            n_tokens: 160,
            hidden_dim: 4,
            ..SynthConfig::default()
        };
        let traces: Vec<Trace> = (0..6).map(|s| synth_trace(&cfg, seed + s).unwrap()).collect();
        build_instances(&traces, &PredictionConfig::default(), seed, Exec::Sequential).unwrap()
    }

    #[test]
    fn make_label_examples() {
        let tr = one_event();
        assert!(make_label(&tr, 12, 2.5, 10).unwrap());
        assert!(!make_label(&tr, 5, 2.5, 10).unwrap());
        assert!(make_label(&tr, 60, 2.5, 10).is_err());
        let quiet = synth_trace(
            &SynthConfig {
                n_tokens: 64,
                events: Some(vec![]),
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        assert!((0..50).all(|t| !make_label(&quiet, t, 2.5, 10).unwrap()));
    }

    #[test]
    fn zero_params_give_half() {
        let tr = one_event();
        let w = window_at(&tr, 0).unwrap();
        let p = PredictorParams::zeros(w.features.len(), 32);
        assert_eq!(predict(&p, &w).unwrap(), 0.5);
        let hd = tr.frames[0].hidden_summary.len();
        let n = SignalFrame::neutral(hd);
        let frames = vec![&n; WINDOW];
        assert_eq!(predict_frames(&p, &frames).unwrap(), 0.5);
    }

    #[test]
    fn window_pads_with_neutral_frames() {
        let tr = one_event();
        let w = window_at(&tr, 2).unwrap();
        let per = frame_features(tr.frames[0].hidden_summary.len());
        assert!(w.features[..13 * per].iter().all(|&v| v == 0.0));
        assert_eq!(w.features[13 * per], tr.frames[0].entropy);
        assert_eq!(w.o[0], tr.frames[2].entropy);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let tr = one_event();
        let mut w = window_at(&tr, 30).unwrap();
        let p = PredictorParams::zeros(w.features.len(), 8);
        w.features[3] = f64::NAN;
        assert!(matches!(predict(&p, &w), Err(Error::NonFinite(_))));
    }

    fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.5, 0.2], &[true, true]).is_err());
        let mut rng = math::stream(42, &[]);
        let s: Vec<f64> = (0..200).map(|_| (rng.random::<f64>() * 20.0).floor() / 20.0).collect();
        let l: Vec<bool> = (0..200).map(|_| rng.random::<bool>()).collect();
        assert!((auroc(&s, &l).unwrap() - brute_auroc(&s, &l)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(pairs in prop::collection::vec((0u8..12, any::<bool>()), 2..80)) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let l: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let r = auroc(&s, &l);
            if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
                prop_assert!(r.is_err());
            } else {
                prop_assert!((r.unwrap() - brute_auroc(&s, &l)).abs() < 1e-12);
            }
        }

        #[test]
        fn head_is_monotone(j in 0..N_OUT, w in 0.01f64..3.0, base in -2.0f64..2.0, bump in 0.01f64..2.0) {
            let mut p = PredictorParams::zeros(4, 2);
            p.head_mut()[2 + j] = w;
            let mut win = Window { features: vec![0.0; 4], o: [0.0; N_OUT] };
            win.o[j] = base;
            let lo = predict(&p, &win).unwrap();
            win.o[j] = base + bump;
            prop_assert!(predict(&p, &win).unwrap() > lo);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = small_set(11);
        let n_in = data[0].window.features.len();
        let mut p = PredictorParams::init(n_in, 8, 3);
        p.fit_scaling(&data);
        let mut rng = math::stream(5, &[]);
        for w in p.head_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let sub: Vec<Instance> = data.into_iter().take(40).collect();
        let worst = grad_check(&p, &sub, 100, 1e-5, 9);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let data = small_set(21);
        let cfg = TrainConfig {
            epochs: 3,
            d_z: 8,
            ..TrainConfig::default()
        };
        let a = train_supervised(&data, &cfg, Exec::Parallel).unwrap();
        let b = train_supervised(&data, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let zero = PredictorParams::zeros(a.n_in(), 8);
        assert!(mean_bce(&a, &data, Exec::Sequential).unwrap() < mean_bce(&zero, &data, Exec::Sequential).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<Instance> = small_set(2).into_iter().filter(|i| i.label).collect();
        assert!(matches!(
            train_supervised(&data, &TrainConfig::default(), Exec::Sequential),
            Err(Error::SingleClass { .. })
        ));
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let data = small_set(4);
        let p = train_supervised(
            &data,
            &TrainConfig {
                epochs: 1,
                d_z: 4,
                ..TrainConfig::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        let back = PredictorParams::from_blob(Blob::from_bytes(&p.to_blob().to_bytes()).unwrap()).unwrap();
        assert_eq!(p, back);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        assert_eq!(PredictorParams::load(&path).unwrap(), p);
    }
}

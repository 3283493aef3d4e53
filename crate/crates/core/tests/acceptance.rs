//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use prefetch_rag::bench::{self, compute_metrics, run_baseline, sweep_hyper, sweep_latency, Experiment, HyperParam, MetricsConfig};
use prefetch_rag::config::Config;
use prefetch_rag::math;
use prefetch_rag::monitor::{self, context_score, ContextState, MonitorParams, MonitorTrainConfig};
use prefetch_rag::parallel::Exec;
use prefetch_rag::policy::{self, Action, ActionOutcome, PolicyConfig, PolicyParams, PolicyState, Resolution, RewardTable};
use prefetch_rag::predictor::{self, PredictionConfig, PredictorParams};
use prefetch_rag::query::QueryConfig;
use prefetch_rag::retriever::{Corpus, CorpusConfig, LatencyModel};
use prefetch_rag::runtime::cache::{CacheEntry, ResultCache};
use prefetch_rag::runtime::guard::{can_trigger, GuardConfig, GuardrailState};
use prefetch_rag::runtime::log::{EventKind, RetrievalSource, RunEventLog};
use prefetch_rag::runtime::queue::{PrefetchRequest, RequestQueue};
use prefetch_rag::runtime::{run_generation, Bundle, Env, Mode, RuntimeConfig};
use prefetch_rag::synth::{label_oracle, synth_batch, synth_trace_in, EventClass, EventSpec, SynthConfig, Trace, World};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Default experiment, its trained components and evaluation traces, built once.
struct Shared {
    exp: Experiment,
    bundle: Bundle,
    traces: Vec<Trace>,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let exp = Experiment::new(Config::default(), 1, Exec::Parallel).expect("default experiment");
        let bundle = exp.train_bundle().expect("training");
        let traces = exp.eval_traces().expect("eval traces");
        Shared { exp, bundle, traces }
    })
}

fn env_for(cfg: &SynthConfig, latency: LatencyModel) -> (World, Env) {
    let world = World::from_config(cfg);
    let corpus = Arc::new(Corpus::generate(&world, &CorpusConfig::default(), 9));
    let env = Env::new(&world, corpus, latency, 5, QueryConfig::default()).expect("env");
    (world, env)
}

fn spaced(n: usize, positions: &[usize]) -> SynthConfig {
    SynthConfig {
        n_tokens: n,
        events: Some(positions.iter().map(|&p| EventSpec::at(p)).collect()),
        ..Default::default()
    }
}

/// Components whose predictor is always confident, so the guard alone decides.
fn confident_bundle(trace: &Trace) -> Bundle {
    let n_in = predictor::window_at(trace, 0).expect("window").features.len();
    let mut p = PredictorParams::zeros(n_in, 8);
    p.set_bias(6.0);
    Bundle {
        predictor: p,
        monitor: MonitorParams::zeros(trace.context_embeddings[0].len()),
        policy: PolicyParams::default(),
    }
}

fn count(log: &RunEventLog, pred: impl Fn(&EventKind) -> bool) -> usize {
    log.count(pred)
}

fn end_time(log: &RunEventLog) -> f64 {
    log.events.last().map_or(0.0, |e| e.time_ms)
}

fn c01_latency_hiding() -> Check {
    let cfg = spaced(300, &[40, 110, 180, 250]);
    let lead = 9;
    let budget = lead as f64 * RuntimeConfig::default().token_time_ms;
    ensure!((budget - 433.8).abs() < 1e-9, "lead budget {budget}");
    let mut detail = Vec::new();
    for (ms, hit) in [(125.0, true), (500.0, false)] {
        ensure!((budget >= ms) == hit, "arithmetic at {ms} ms");
        let (world, env) = env_for(&cfg, LatencyModel::Fixed { ms });
        let trace = ok(synth_trace_in(&cfg, &world, 3))?;
        let rc = RuntimeConfig {
            mode: Mode::OraclePrefetch,
            oracle_lead: Some(lead),
            ..Default::default()
        };
        let log = ok(run_generation(&trace, None, &env, &rc, 1))?.log;
        let hits = count(&log, |k| matches!(k, EventKind::CacheHit { .. }));
        let misses = count(&log, |k| matches!(k, EventKind::CacheMiss { .. }));
        let want = if hit { (4, 0) } else { (0, 4) };
        ensure!((hits, misses) == want, "{ms} ms: {hits} hits, {misses} misses");
        detail.push(format!("{ms} ms: {hits}/4 hit"));
    }
    Ok(detail.join(", "))
}

fn c02_fallback_floor() -> Check {
    let s = shared();
    let rc = &s.exp.cfg.runtime;
    let traces: Vec<Trace> = ok(synth_batch(&s.exp.eval_synth(), 77_000, 100, Exec::Parallel))?;
    let (_, sync) = ok(run_baseline(Mode::SyncReactive, rc, &traces, &s.exp.env, None, 1, Exec::Parallel))?;
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for mode in [Mode::Predictive, Mode::FixedInterval, Mode::StaleQuery, Mode::OraclePrefetch] {
        let (_, outs) = ok(run_baseline(mode, rc, &traces, &s.exp.env, Some(&s.bundle), 1, Exec::Parallel))?;
        for (a, b) in outs.iter().zip(&sync) {
            let ratio = end_time(&a.log) / end_time(&b.log);
            worst = worst.max(ratio);
            violations += (ratio > 1.066) as usize;
        }
    }
    ensure!(violations == 0, "{violations} runs above 1.066x sync (worst {worst:.4})");
    Ok(format!("400 async runs, worst ratio {worst:.4}"))
}

fn c03_predictor_quality() -> Check {
    let s = shared();
    let pc = &s.exp.cfg.runtime.prediction;
    let held_out = ok(synth_batch(&s.exp.cfg.synth, 55_000_000, 400, Exec::Parallel))?;
    let mut inst = ok(predictor::build_instances(&held_out, pc, 2, Exec::Parallel))?;
    ensure!(inst.len() >= 10_000, "only {} held-out instances", inst.len());
    inst.shuffle(&mut math::stream(3, &[]));
    inst.truncate(10_000);
    let labels = predictor::labels(&inst);
    let ours = ok(predictor::auroc(
        &ok(predictor::predict_all(&s.bundle.predictor, &inst, Exec::Parallel))?,
        &labels,
    ))?;
    let entropy = ok(predictor::auroc(&predictor::entropy_only_scores(&inst), &labels))?;
    ensure!(ours >= 0.75, "AUROC {ours:.4} < 0.75");
    ensure!(ours >= entropy + 0.05, "AUROC {ours:.4} vs entropy-only {entropy:.4}");
    Ok(format!("AUROC {ours:.4}, entropy-only {entropy:.4}, n=10000"))
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn c04_auroc_oracle() -> Check {
    let mut rng = math::stream(4, &[]);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(2..400);
        // coarse scores force plenty of ties
        let levels = if case % 2 == 0 { 8 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let fast = ok(predictor::auroc(&scores, &labels))?;
        let slow = brute_auroc(&scores, &labels);
        worst = worst.max((fast - slow).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("50 instances, max deviation {worst:e}"))
}

fn random_state(rng: &mut impl Rng) -> PolicyState {
    PolicyState {
        signals: std::array::from_fn(|_| rng.random_range(-1.0..2.0)),
        p_hat: rng.random_range(0.7..1.0),
        sufficiency: rng.random_range(0.0..1.0),
        clarity: rng.random_range(0.0..1.0),
        cache_size: rng.random_range(1..=10),
        cache_max_cos: rng.random_range(-1.0..1.0),
        tokens_since_last_retrieval: rng.random_range(0..200),
        extensions_remaining: rng.random_range(1..=2),
    }
}

fn c05_gradient_checks() -> Check {
    let cfg = PolicyConfig::default();
    let mut rng = math::stream(5, &[]);
    let mut worst_pol: f64 = 0.0;
    for i in 0..100u64 {
        let params = PolicyParams::random(i, 0.5);
        let state = random_state(&mut rng);
        let action = Action::ALL[rng.random_range(0..4)];
        let g = ok(policy::log_prob_grad(&params, &state, action, &cfg))?;
        let k = rng.random_range(0..g.len());
        let step = 1e-4;
        let lp = |p: &PolicyParams| policy::action_probs(p, &state, &cfg)[action.index()].ln();
        let mut q = params.clone();
        q.phi[k] += step;
        let up = lp(&q);
        q.phi[k] -= 2.0 * step;
        let down = lp(&q);
        worst_pol = worst_pol.max(math::rel_err(g[k], (up - down) / (2.0 * step)));
    }
    ensure!(worst_pol < 1e-4, "REINFORCE gradient error {worst_pol:e}");

    let synth = SynthConfig {
        n_tokens: 160,
        ..Default::default()
    };
    let traces = ok(synth_batch(&synth, 900, 6, Exec::Sequential))?;
    let inst = ok(predictor::build_instances(
        &traces,
        &PredictionConfig::default(),
        1,
        Exec::Sequential,
    ))?;
    let inst = &inst[..inst.len().min(64)];
    let n_in = inst[0].window.features.len();
    let p = PredictorParams::init(n_in, 8, 11);
    let worst_pred = predictor::grad_check(&p, inst, 100, 1e-5, 12);
    ensure!(worst_pred < 1e-4, "predictor gradient error {worst_pred:e}");

    let (world, env) = env_for(&synth, LatencyModel::default());
    let mut data = Vec::new();
    for seed in 0..12 {
        let t = ok(synth_trace_in(&synth, &world, seed))?;
        data.extend(ok(monitor::monitor_instances(
            &t,
            &label_oracle(&t, &env.retriever, &Default::default()),
        ))?);
    }
    ensure!(!data.is_empty(), "no monitor instances");
    let mp = monitor::random_params(world.emb_dim(), 13);
    let worst_mon = monitor::grad_check(&mp, &data, &MonitorTrainConfig::default(), 100, 1e-5, 14);
    ensure!(worst_mon < 1e-4, "monitor gradient error {worst_mon:e}");
    Ok(format!(
        "max rel err: policy {worst_pol:.1e}, predictor {worst_pred:.1e}, monitor {worst_mon:.1e}"
    ))
}

fn c06_guardrails() -> Check {
    // Guard alone: prediction flickers around τ and entropy around θ_low.
    let g = GuardConfig::default();
    let mut st = GuardrailState::new(&g);
    let mut fired = 0;
    for t in 0..400 {
        let p = if t % 2 == 0 || (100..104).contains(&t) { 0.9 } else { 0.3 };
        let h = if t % 2 == 0 { 2.3 } else { 1.9 };
        st.observe(&g, p, 0.65, h, false);
        if can_trigger(&st, &g) {
            fired += 1;
            st.on_trigger();
        }
    }
    ensure!(fired == 1, "guard fired {fired} times on oscillating input");

    // Full runtime: entropy oscillates across θ_low without reaching θ.
    let cfg = spaced(300, &[]);
    let (world, env) = env_for(&cfg, LatencyModel::default());
    let mut trace = ok(synth_trace_in(&cfg, &world, 6))?;
    for (t, f) in trace.frames.iter_mut().enumerate() {
        f.entropy = if t % 2 == 0 { 2.3 } else { 1.9 };
    }
    let b = confident_bundle(&trace);
    let rc = RuntimeConfig::default();
    let log = ok(run_generation(&trace, Some(&b), &env, &rc, 1))?.log;
    let triggers = count(&log, |k| matches!(k, EventKind::Trigger { .. }));
    ensure!(triggers == 1, "oscillating trace: {triggers} triggers");

    // Two needs 10 tokens apart inside one spacing window.
    let cfg = SynthConfig {
        suppressed_spans: vec![(0, 20), (70, 120)],
        ..spaced(120, &[40, 50])
    };
    let (world, env) = env_for(&cfg, LatencyModel::default());
    let trace = ok(synth_trace_in(&cfg, &world, 2))?;
    let log = ok(run_generation(&trace, Some(&confident_bundle(&trace)), &env, &rc, 1))?.log;
    let close_triggers = count(&log, |k| matches!(k, EventKind::Trigger { .. }));
    let prefetches = count(&log, |k| {
        matches!(
            k,
            EventKind::RetrievalStart {
                source: RetrievalSource::Prefetch,
                ..
            }
        )
    });
    ensure!(
        close_triggers == 1 && prefetches == 1,
        "close events: {close_triggers} triggers, {prefetches} prefetches"
    );
    Ok("oscillating: 1 trigger (guard and runtime); events 10 apart: 1 prefetch".into())
}

fn entry(id: u64) -> CacheEntry {
    CacheEntry {
        request_id: id,
        docs: Vec::new(),
        embeddings: Vec::new(),
        completion_time: id as f64,
        use_count: 0,
    }
}

fn c07_cache_and_queue() -> Check {
    let mut cache = ResultCache::new(10);
    let mut evicted = Vec::new();
    for id in 0..11 {
        if let Some(e) = cache.put(entry(id)) {
            evicted.push(e);
        }
        ensure!(cache.len() <= 10, "size {} after insert {id}", cache.len());
    }
    ensure!(evicted == [0], "evicted {evicted:?}");
    ensure!(!cache.contains(0) && cache.contains(10), "wrong contents {:?}", cache.ids());

    // Refreshing an entry moves the eviction to the next oldest.
    let mut cache = ResultCache::new(10);
    for id in 0..10 {
        cache.put(entry(id));
    }
    ensure!(cache.get(0).is_some(), "entry 0 missing");
    let e = cache.put(entry(10));
    ensure!(e == Some(1) && cache.len() == 10, "refreshed eviction {e:?}");

    let mut rng = math::stream(7, &[]);
    let mut q = RequestQueue::default();
    let mut reqs = Vec::new();
    for id in 0..1000u64 {
        let r = PrefetchRequest {
            request_id: id,
            queries: Vec::new(),
            confidence: rng.random_range(0.0..1.0),
            // few distinct values so the tie-breaks are exercised
            issue_time: rng.random_range(0..20) as f64,
            predicted_need_token: 0,
            priority: rng.random_range(0..50) as f64 / 50.0,
        };
        reqs.push(r.clone());
        q.enqueue(r);
    }
    reqs.sort_by(|a, b| {
        b.priority
            .total_cmp(&a.priority)
            .then(a.issue_time.total_cmp(&b.issue_time))
            .then(a.request_id.cmp(&b.request_id))
    });
    let got: Vec<u64> = std::iter::from_fn(|| q.dequeue().map(|r| r.request_id)).collect();
    let want: Vec<u64> = reqs.iter().map(|r| r.request_id).collect();
    ensure!(got == want, "dequeue order differs from the sort oracle");
    Ok("11th insert evicts LRU, size <= 10; 1000 dequeues match sort".into())
}

fn c08_reward_table() -> Check {
    use Resolution::*;
    let table = RewardTable::default();
    let expected = [
        (QualityMaintained, 0.3),
        (MissedOpportunity, -0.8),
        (Sufficient, 1.0),
        (Insufficient, -0.5),
        (ImprovedQuery, 0.2),
        (ExcessiveDelay, -0.3),
        (QualityImproving, 1.0),
        (Unused, -0.5),
        (LateBlocking, -2.0),
    ];
    for (r, want) in expected {
        let got = ok(policy::reward_of(
            &ActionOutcome {
                action: r.action(),
                resolution: Some(r),
            },
            &table,
        ))?;
        ensure!(got.to_bits() == f64::to_bits(want), "{r:?}: {got} != {want}");
    }
    Ok("9 action-outcome pairs bit-exact".into())
}

/// Stationary bandit: each action's success chance depends on the state, and
/// rewards come from the shared reward table.
fn bandit_outcome(state: &PolicyState, action: Action, rng: &mut impl Rng) -> Resolution {
    use Resolution::*;
    let u: f64 = rng.random();
    match action {
        Action::Generate => {
            if u < 0.2 {
                QualityMaintained
            } else {
                MissedOpportunity
            }
        }
        Action::Reuse => {
            if u < state.sufficiency {
                Sufficient
            } else {
                Insufficient
            }
        }
        Action::Accumulate => {
            if u < 1.0 - state.clarity {
                ImprovedQuery
            } else {
                ExcessiveDelay
            }
        }
        Action::Fetch => {
            if u < 0.55 {
                QualityImproving
            } else {
                Unused
            }
        }
    }
}

fn c09_bandit_improvement() -> Check {
    let table = RewardTable::default();
    let cfg = PolicyConfig {
        explore: true,
        lr: 0.005,
        ..Default::default()
    };
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut rng = math::stream(seed, &[0x9]);
        let mut params = PolicyParams::default();
        let mut rewards = Vec::with_capacity(2000);
        for _ in 0..2000 {
            let s = random_state(&mut rng);
            let a = policy::decide(&params, &s, &cfg, &mut rng);
            let r = bandit_outcome(&s, a, &mut rng);
            let reward = ok(policy::reward_of(
                &ActionOutcome {
                    action: a,
                    resolution: Some(r),
                },
                &table,
            ))?;
            ok(policy::update(&mut params, &s, a, reward, &cfg))?;
            rewards.push(reward);
        }
        let early = math::mean(&rewards[..500]);
        let late = math::mean(&rewards[1500..]);
        ensure!(late > early, "seed {seed}: late {late:.3} <= early {early:.3}");
        lines.push(format!("{early:.2}->{late:.2}"));
    }
    Ok(format!("mean reward 1-500 -> 1501-2000: {}", lines.join(", ")))
}

fn c10_wait_time() -> Check {
    let s = shared();
    let held_out = ok(synth_batch(&s.exp.cfg.synth, 66_000_000, 400, Exec::Parallel))?;
    let mut matched = 0usize;
    let mut factual = 0usize;
    let mut k_sum = [0.0; 3];
    let mut k_n = [0usize; 3];
    for t in &held_out {
        for li in label_oracle(t, &s.exp.env.retriever, &s.exp.cfg.labels) {
            let Some(best) = li.best_wait() else { continue };
            let (_, k) = context_score(&s.bundle.monitor, &ok(ContextState::at(t, li.position, 0))?);
            let c = li.event_class.index();
            k_sum[c] += k as f64;
            k_n[c] += 1;
            if li.event_class == EventClass::Factual {
                factual += 1;
                matched += (k == best) as usize;
            }
        }
    }
    ensure!(factual >= 50, "only {factual} held-out factual events");
    let rate = matched as f64 / factual as f64;
    let mean = |c: EventClass| k_sum[c.index()] / k_n[c.index()].max(1) as f64;
    let (f, r, e) = (
        mean(EventClass::Factual),
        mean(EventClass::Reasoning),
        mean(EventClass::Explanation),
    );
    ensure!(rate >= 0.5, "factual k* match {rate:.3} < 0.5");
    ensure!(f > r && r > e, "mean k* ordering F {f:.2}, R {r:.2}, E {e:.2}");
    Ok(format!(
        "factual match {rate:.3} (n={factual}); mean k* F {f:.2} > R {r:.2} > E {e:.2}"
    ))
}

fn c11_latency_sweep() -> Check {
    let s = shared();
    let grid = [50.0, 125.0, 200.0, 500.0, 1000.0];
    let pts = ok(sweep_latency(&s.exp, &s.bundle, &s.traces, &grid))?;
    let hits: Vec<f64> = pts.iter().map(|p| p.hit_rate).collect();
    ensure!(hits.windows(2).all(|w| w[1] <= w[0]), "hit rate not non-increasing: {hits:?}");
    let red = |ms: f64| pts.iter().find(|p| p.latency_ms == ms).map(|p| p.e2e_reduction).unwrap_or(f64::NAN);
    ensure!(
        red(200.0) >= red(1000.0),
        "e2e reduction 200 ms {:.2} < 1000 ms {:.2}",
        red(200.0),
        red(1000.0)
    );
    ensure!(hits[4] > 0.0, "no hits at 1000 ms");
    let h: Vec<String> = hits.iter().map(|h| format!("{h:.3}")).collect();
    Ok(format!(
        "hit [{}], e2e red 200 {:.2}% >= 1000 {:.2}%",
        h.join(", "),
        red(200.0),
        red(1000.0)
    ))
}

fn c12_hyper_directions() -> Check {
    let s = shared();
    let tau = ok(sweep_hyper(&s.exp, &s.bundle, &s.traces, HyperParam::TauRag, &[0.5, 0.65, 0.8]))?;
    let ret: Vec<f64> = tau.iter().map(|p| p.ret_per_1k).collect();
    ensure!(
        ret.windows(2).all(|w| w[1] < w[0]),
        "ret/1k not strictly decreasing in tau: {ret:?}"
    );
    let hz = ok(sweep_hyper(&s.exp, &s.bundle, &s.traces, HyperParam::Horizon, &[5.0, 10.0]))?;
    ensure!(
        hz[1].hit_rate >= hz[0].hit_rate,
        "hit at horizon 10 {:.3} < horizon 5 {:.3}",
        hz[1].hit_rate,
        hz[0].hit_rate
    );
    Ok(format!(
        "ret/1k {:.2} > {:.2} > {:.2}; hit h5 {:.3} <= h10 {:.3}",
        ret[0], ret[1], ret[2], hz[0].hit_rate, hz[1].hit_rate
    ))
}

fn c13_metric_identities() -> Check {
    let round1 = |x: f64| (x * 10.0).round() / 10.0;
    for (name, f1, e2e_s, em, eff, q) in [("ours", 75.1, 5.2, 68.7, 14.4, 7.6), ("sync", 75.1, 9.2, 69.2, 8.2, 13.3)] {
        let e = round1(bench::efficiency(f1, e2e_s * 1000.0));
        let a = bench::qal(e2e_s * 1000.0, em).map(round1);
        ensure!(e == eff && a == Some(q), "{name}: efficiency {e}, qal {a:?}");
    }
    Ok("(14.4, 7.6) and (8.2, 13.3) reproduced".into())
}

fn c14_determinism() -> Check {
    let s = shared();
    let rc = &s.exp.cfg.runtime;
    let traces = &s.traces[..40];
    for mode in [Mode::SyncReactive, Mode::Predictive, Mode::OraclePrefetch] {
        let (ma, a) = ok(run_baseline(mode, rc, traces, &s.exp.env, Some(&s.bundle), 1, Exec::Parallel))?;
        let (mb, b) = ok(run_baseline(mode, rc, traces, &s.exp.env, Some(&s.bundle), 1, Exec::Sequential))?;
        let la: String = a.iter().map(|o| o.log.to_jsonl()).collect();
        let lb: String = b.iter().map(|o| o.log.to_jsonl()).collect();
        ensure!(la == lb, "{mode:?}: event logs differ");
        ensure!(
            ok(serde_json::to_string(&ma))? == ok(serde_json::to_string(&mb))?,
            "{mode:?}: reports differ"
        );
    }
    let threaded = RuntimeConfig {
        concurrent: true,
        ..rc.clone()
    };
    let synth = s.exp.eval_synth();
    for seed in 0..10u64 {
        let traces = ok(synth_batch(&synth, 300_000 + seed * 100, 6, Exec::Parallel))?;
        let (v, _) = ok(run_baseline(
            Mode::Predictive,
            rc,
            &traces,
            &s.exp.env,
            Some(&s.bundle),
            seed,
            Exec::Parallel,
        ))?;
        let (c, _) = ok(run_baseline(
            Mode::Predictive,
            &threaded,
            &traces,
            &s.exp.env,
            Some(&s.bundle),
            seed,
            Exec::Parallel,
        ))?;
        let counts = |m: &bench::MetricsReport| {
            (
                m.retrievals,
                m.prefetches,
                m.triggers,
                m.skips,
                m.fallbacks,
                m.cancelled,
                m.fp_total,
            )
        };
        ensure!(
            counts(&v) == counts(&c),
            "seed {seed}: virtual {:?} vs concurrent {:?}",
            counts(&v),
            counts(&c)
        );
    }
    Ok("byte-identical reruns; concurrent counts equal virtual on 10 seeds".into())
}

fn c15_baseline_ordering() -> Check {
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let exp = ok(Experiment::new(Config::topic_shifting(), seed, Exec::Parallel))?;
        let bundle = ok(exp.train_bundle())?;
        let traces = ok(exp.eval_traces())?;
        let (pred, _) = ok(exp.run(Mode::Predictive, &traces, Some(&bundle)))?;
        let (sync, _) = ok(exp.run(Mode::SyncReactive, &traces, None))?;
        let (stale, _) = ok(exp.run(Mode::StaleQuery, &traces, None))?;
        let (pq, sq) = (pred.mean_qrs.unwrap_or(f64::NAN), stale.mean_qrs.unwrap_or(f64::NAN));
        ensure!(
            pred.e2e_ms < sync.e2e_ms,
            "seed {seed}: predictive e2e {:.1} >= sync {:.1}",
            pred.e2e_ms,
            sync.e2e_ms
        );
        ensure!(pq > sq, "seed {seed}: predictive QRS {pq:.4} <= stale {sq:.4}");
        lines.push(format!("{:.0}<{:.0} {pq:.3}>{sq:.3}", pred.e2e_ms, sync.e2e_ms));
    }
    Ok(lines.join("; "))
}

/// The metrics in a report are recomputable from the exported event logs.
fn recompute_guard() -> Check {
    let s = shared();
    let (m, outs) = ok(s.exp.run(Mode::Predictive, &s.traces[..20], Some(&s.bundle)))?;
    let logs: Vec<RunEventLog> = outs.into_iter().map(|o| o.log).collect();
    let again = ok(compute_metrics(&logs, &MetricsConfig::from_runtime(&s.exp.cfg.runtime)))?;
    ensure!(again == m, "recomputed metrics differ");
    Ok(String::new())
}

fn main() {
    let criteria: [Criterion; 15] = [
        ("1 latency-hiding arithmetic", c01_latency_hiding),
        ("2 fallback floor", c02_fallback_floor),
        ("3 predictor quality", c03_predictor_quality),
        ("4 AUROC oracle equivalence", c04_auroc_oracle),
        ("5 gradient checks", c05_gradient_checks),
        ("6 guardrails", c06_guardrails),
        ("7 cache and queue", c07_cache_and_queue),
        ("8 reward table", c08_reward_table),
        ("9 bandit improvement", c09_bandit_improvement),
        ("10 wait-time learning", c10_wait_time),
        ("11 latency sweep shape", c11_latency_sweep),
        ("12 hyperparameter directions", c12_hyper_directions),
        ("13 metric identities", c13_metric_identities),
        ("14 determinism", c14_determinism),
        ("15 baseline ordering", c15_baseline_ordering),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut run = 0;
    let t0 = Instant::now();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        run += 1;
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = fmt_secs(t.elapsed());
        match res {
            Ok(detail) => println!("PASS  criterion {name} ({secs}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs}): {why}");
            }
        }
    }
    if filter.is_empty() {
        if let Err(why) = recompute_guard() {
            failed += 1;
            println!("FAIL  metrics recompute from logs: {why}");
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {}",
        run - failed.min(run),
        fmt_secs(t0.elapsed())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

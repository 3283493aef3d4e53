use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use parking_lot::{Condvar, Mutex};

use super::cache::{CacheEntry, ResultCache};
use super::guard::{can_trigger, GuardrailState};
use super::log::{EventKind, RetrievalSource, RunEventLog, Served};
use super::queue::{BlockingQueue, PrefetchRequest, RequestQueue};
use super::{Bundle, Env, Mode, RunOutput, RuntimeConfig};
use crate::error::{Error, Result};
use crate::math;
use crate::monitor::{self, ContextState};
use crate::policy::{self, Action, PolicyConfig, PolicyState, Resolution, RewardEvent};
use crate::predictor;
use crate::query::{self, Query, Strategy};
use crate::retriever::ScoredDoc;
use crate::synth::Trace;

const PROMPT_KEY: u64 = 1;
const PREFETCH_KEY: u64 = 2;
const SYNC_KEY: u64 = 3;
const EXPLORE_KEY: u64 = 0xe9;

/// Tokens where entropy crosses `theta` from below.
pub fn need_tokens(trace: &Trace, theta: f64) -> Vec<usize> {
    (1..trace.len())
        .filter(|&t| trace.frames[t].entropy >= theta && trace.frames[t - 1].entropy < theta)
        .collect()
}

/// Ranking happens either inline or on worker threads; the results are the same.
enum Backend<'a> {
    Inline,
    Pool(&'a Pool),
}

struct Pool {
    jobs: BlockingQueue,
    results: Mutex<HashMap<u64, Vec<ScoredDoc>>>,
    ready: Condvar,
}

impl Pool {
    fn work(&self, env: &Env) {
        while let Some(r) = self.jobs.dequeue() {
            let qs: Vec<&[f64]> = r.queries.iter().map(|q| q.embedding.as_slice()).collect();
            let docs = env.retriever.rank_group(&qs, env.retriever.k_docs);
            self.results.lock().insert(r.request_id, docs);
            self.ready.notify_all();
        }
    }

    fn wait_for(&self, id: u64) -> Vec<ScoredDoc> {
        let mut g = self.results.lock();
        loop {
            if let Some(d) = g.remove(&id) {
                return d;
            }
            self.ready.wait(&mut g);
        }
    }
}

pub(super) fn run(trace: &Trace, bundle: Option<&Bundle>, env: &Env, cfg: &RuntimeConfig, seed: u64) -> Result<RunOutput> {
    if !cfg.concurrent {
        return Engine::new(trace, bundle, env, cfg, seed, Backend::Inline).run();
    }
    let pool = Pool {
        jobs: BlockingQueue::default(),
        results: Mutex::new(HashMap::new()),
        ready: Condvar::new(),
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.workers {
            s.spawn(|| pool.work(env));
        }
        let out = Engine::new(trace, bundle, env, cfg, seed, Backend::Pool(&pool)).run();
        pool.jobs.close();
        out
    })
}

struct Request {
    source: RetrievalSource,
    issue_token: usize,
    queries: Vec<Query>,
    latency: f64,
    done: bool,
    docs: Vec<Vec<f64>>,
    consumed: bool,
    cancelled: bool,
    productive: bool,
    /// Policy state of the Fetch decision, predictive mode only.
    fetch: Option<(usize, PolicyState)>,
}

struct InFlight {
    finish: f64,
    id: u64,
    worker: Option<usize>,
}

struct Waiting {
    trigger: usize,
    target: usize,
    extensions: usize,
    confidence: f64,
    sufficiency: f64,
    cache_max_cos: f64,
    cache_size: usize,
    since_retrieval: usize,
    /// Accumulate decisions awaiting resolution: (token, state, clarity features).
    deferrals: Vec<(usize, PolicyState, Vec<f64>)>,
}

struct ReuseArm {
    token: usize,
    entry: u64,
    state: PolicyState,
    e_c: Vec<f64>,
    m: f64,
}

enum Route {
    Predictor { token: usize, label: bool },
    Sufficiency { e_c: Vec<f64>, m: f64, label: bool },
    Clarity { h: Vec<f64>, target: f64 },
    QueryGen,
}

struct Engine<'a> {
    trace: &'a Trace,
    env: &'a Env,
    cfg: &'a RuntimeConfig,
    seed: u64,
    bundle: Option<Cow<'a, Bundle>>,
    backend: Backend<'a>,
    log: RunEventLog,
    rewards: Vec<RewardEvent>,
    now: f64,
    next_id: u64,
    requests: BTreeMap<u64, Request>,
    queue: RequestQueue,
    worker_busy: Vec<bool>,
    inflight: Vec<InFlight>,
    cache: ResultCache,
    needs: BTreeSet<usize>,
    /// Need tokens served by a blocking fallback.
    fell_back: BTreeSet<usize>,
    issued_at: HashMap<usize, u64>,
    // Entropy-threshold mode: need waiting for the debounce token.
    pending_need: Option<usize>,
    // Predictive mode.
    guard: GuardrailState,
    waiting: Option<Waiting>,
    reuse: Option<ReuseArm>,
    generates: VecDeque<(usize, PolicyState)>,
    explore_calls: u64,
}

impl<'a> Engine<'a> {
    fn new(trace: &'a Trace, bundle: Option<&'a Bundle>, env: &'a Env, cfg: &'a RuntimeConfig, seed: u64, backend: Backend<'a>) -> Self {
        Engine {
            trace,
            env,
            cfg,
            seed,
            bundle: bundle.map(Cow::Borrowed),
            backend,
            log: RunEventLog::default(),
            rewards: Vec::new(),
            now: 0.0,
            next_id: 0,
            requests: BTreeMap::new(),
            queue: RequestQueue::default(),
            worker_busy: vec![false; cfg.workers],
            inflight: Vec::new(),
            cache: ResultCache::new(cfg.cache_capacity),
            needs: need_tokens(trace, cfg.prediction.theta).into_iter().collect(),
            fell_back: BTreeSet::new(),
            issued_at: HashMap::new(),
            pending_need: None,
            guard: GuardrailState::new(&cfg.guard),
            waiting: None,
            reuse: None,
            generates: VecDeque::new(),
            explore_calls: 0,
        }
    }

    fn run(mut self) -> Result<RunOutput> {
        let n = self.trace.len();
        let mode = self.cfg.mode;
        self.log.push(
            0.0,
            0,
            EventKind::QueryStart {
                trace_id: self.trace.id,
                n_tokens: n,
                mode: mode.name().into(),
            },
        );
        self.prompt_phase()?;
        for i in 0..n {
            let scored = mode == Mode::Predictive && self.predictor_needed();
            let overhead = if scored { self.cfg.predictor_overhead_ms } else { 0.0 };
            let t = self.now + self.cfg.token_time_ms + overhead;
            self.advance_to(t)?;
            self.now = t;
            let p_hat = if scored {
                Some(predictor::predict(&self.b().predictor, &predictor::window_at(self.trace, i)?)?)
            } else {
                None
            };
            self.log.push(self.now, i, EventKind::TokenEmitted { p_hat });
            if self.needs.contains(&i) {
                self.handle_need(i)?;
            }
            match mode {
                Mode::NoRetrieval | Mode::SyncReactive => {}
                Mode::EntropyThreshold => self.entropy_step(i)?,
                Mode::FixedInterval | Mode::StaleQuery => self.interval_step(i)?,
                Mode::OraclePrefetch => self.oracle_step(i)?,
                Mode::Predictive => self.predictive_step(i, p_hat)?,
            }
            self.expire(i)?;
        }
        self.finish_query(n - 1)?;
        let bundle = self.bundle.filter(|_| self.cfg.online_updates).map(Cow::into_owned);
        Ok(RunOutput {
            log: self.log,
            rewards: self.rewards,
            bundle,
        })
    }

    /// Whether this token's prediction can contribute to a trigger. Inside the
    /// spacing window the debounce run cannot complete, so the predictor and
    /// its overhead are skipped.
    fn predictor_needed(&self) -> bool {
        let g = &self.cfg.guard;
        self.guard.tokens_since_last_retrieval + g.debounce >= g.s_min
    }

    fn b(&self) -> &Bundle {
        self.bundle.as_deref().expect("predictive bundle")
    }

    fn context(&self, t: usize) -> &'a [f64] {
        &self.trace.context_embeddings[t]
    }

    fn need_embedding(&self, t: usize) -> &'a [f64] {
        self.trace.event_at(t).map_or(self.context(t), |e| &e.need_embedding)
    }

    fn latency(&self, tags: &[u64]) -> f64 {
        let mut keys = vec![self.trace.id];
        keys.extend_from_slice(tags);
        let z = math::gauss(&mut math::stream(self.seed, &keys));
        self.env.retriever.latency.from_z(z)
    }

    fn focused(&self, embedding: &[f64], token: usize) -> Vec<Query> {
        vec![Query {
            embedding: embedding.to_vec(),
            strategy: Strategy::Focused,
            origin_token: token,
            variant_index: 0,
        }]
    }

    fn new_request(&mut self, source: RetrievalSource, issue_token: usize, queries: Vec<Query>, latency: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.requests.insert(
            id,
            Request {
                source,
                issue_token,
                queries,
                latency,
                done: false,
                docs: Vec::new(),
                consumed: false,
                cancelled: false,
                productive: false,
                fetch: None,
            },
        );
        id
    }

    /// Start `id` at `at`, on `worker` or in the generation thread.
    fn start(&mut self, id: u64, at: f64, token: usize, worker: Option<usize>) {
        let r = &self.requests[&id];
        let source = r.source;
        let finish = at + r.latency;
        if let Backend::Pool(pool) = self.backend {
            pool.jobs.enqueue(PrefetchRequest {
                request_id: id,
                queries: r.queries.clone(),
                confidence: 1.0,
                issue_time: at,
                predicted_need_token: token,
                priority: f64::MAX,
            });
        }
        if let Some(w) = worker {
            self.worker_busy[w] = true;
        }
        self.log.push(at, token, EventKind::RetrievalStart { request_id: id, source });
        self.inflight.push(InFlight { finish, id, worker });
    }

    fn rank(&self, id: u64) -> Vec<ScoredDoc> {
        match self.backend {
            Backend::Pool(pool) => pool.wait_for(id),
            Backend::Inline => {
                let r = &self.requests[&id];
                let qs: Vec<&[f64]> = r.queries.iter().map(|q| q.embedding.as_slice()).collect();
                self.env.retriever.rank_group(&qs, self.env.retriever.k_docs)
            }
        }
    }

    /// Process every retrieval finishing at or before `t`, in time order.
    fn advance_to(&mut self, t: f64) -> Result<()> {
        loop {
            let next = self
                .inflight
                .iter()
                .enumerate()
                .filter(|(_, f)| f.finish <= t)
                .min_by(|(_, a), (_, b)| a.finish.total_cmp(&b.finish).then(a.id.cmp(&b.id)))
                .map(|(k, _)| k);
            let Some(k) = next else { return Ok(()) };
            let f = self.inflight.swap_remove(k);
            self.complete(f)?;
        }
    }

    fn complete(&mut self, f: InFlight) -> Result<()> {
        let docs = self.rank(f.id);
        let embeddings: Vec<Vec<f64>> = docs.iter().map(|d| self.env.retriever.doc(d.doc_id).embedding.clone()).collect();
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let r = self.requests.get_mut(&f.id).expect("known request");
        let qrs = if refs.is_empty() {
            0.0
        } else {
            r.queries.iter().map(|q| query::qrs(&q.embedding, &refs)).sum::<Result<f64>>()? / r.queries.len() as f64
        };
        r.done = true;
        r.docs = embeddings.clone();
        let token = self.log.events.last().map_or(0, |e| e.token_index);
        self.log.push(
            f.finish,
            token,
            EventKind::RetrievalFinish {
                request_id: f.id,
                latency_ms: r.latency,
                qrs,
            },
        );
        self.cache.put(CacheEntry {
            request_id: f.id,
            docs,
            embeddings,
            completion_time: f.finish,
            use_count: 0,
        });
        if let Some(w) = f.worker {
            self.worker_busy[w] = false;
            if let Some(next) = self.queue.dequeue() {
                self.start(next.request_id, f.finish, token, Some(w));
            }
        }
        Ok(())
    }

    fn free_worker(&self) -> Option<usize> {
        self.worker_busy.iter().position(|b| !b)
    }

    fn prompt_phase(&mut self) -> Result<()> {
        let mode = self.cfg.mode;
        if mode == Mode::NoRetrieval {
            self.now = self.cfg.prefill_ms;
            return Ok(());
        }
        let latency = self.latency(&[PROMPT_KEY]);
        let queries = self.focused(self.context(0), 0);
        let id = self.new_request(RetrievalSource::Prompt, 0, queries, latency);
        if mode.is_async() {
            self.start(id, 0.0, 0, Some(0));
            let ready = self.cfg.prefill_ms.max(latency);
            self.advance_to(ready)?;
            self.now = ready;
        } else {
            self.now = self.cfg.prefill_ms;
            self.start(id, self.now, 0, None);
            self.advance_to(self.now + latency)?;
            self.now += latency;
        }
        Ok(())
    }

    /// Blocking retrieval in the generation thread; returns the docs.
    fn sync_retrieve(&mut self, token: usize, query: &[f64]) -> Result<Vec<Vec<f64>>> {
        let latency = self.latency(&[SYNC_KEY, token as u64]);
        let queries = self.focused(query, token);
        let id = self.new_request(RetrievalSource::Sync, token, queries, latency);
        self.start(id, self.now, token, None);
        self.advance_to(self.now + latency)?;
        self.now += latency;
        Ok(self.requests[&id].docs.clone())
    }

    fn integrate(&mut self, token: usize, served: Served, docs: &[Vec<f64>]) -> f64 {
        let need = self.need_embedding(token);
        let best = docs.iter().map(|d| math::cosine(d, need)).fold(0.0, f64::max).clamp(0.0, 1.0);
        self.log.push(self.now, token, EventKind::Integrate { served, best_cos: best });
        best
    }

    /// Queue a prefetch request, starting it at once if a worker is free.
    fn enqueue(&mut self, token: usize, trigger: usize, queries: Vec<Query>, confidence: f64, fetch: Option<(usize, PolicyState)>) {
        let ordinal = self.issued_at.entry(token).or_insert(0);
        let tag = *ordinal;
        *ordinal += 1;
        let latency = self.latency(&[PREFETCH_KEY, token as u64, tag]);
        let strategy = queries[0].strategy;
        let n_queries = queries.len();
        let priority = PrefetchRequest::priority_for(confidence, self.env.retriever.latency.median_ms());
        let id = self.new_request(RetrievalSource::Prefetch, token, queries, latency);
        self.requests.get_mut(&id).expect("new request").fetch = fetch;
        let predicted_need = trigger + self.cfg.prediction.horizon;
        self.log.push(
            self.now,
            token,
            EventKind::Enqueue {
                request_id: id,
                trigger_token: trigger,
                confidence,
                priority,
                strategy,
                n_queries,
                predicted_need,
            },
        );
        match self.free_worker() {
            Some(w) => self.start(id, self.now, token, Some(w)),
            None => self.queue.enqueue(PrefetchRequest {
                request_id: id,
                queries: Vec::new(),
                confidence,
                issue_time: self.now,
                predicted_need_token: predicted_need,
                priority,
            }),
        }
    }

    fn handle_need(&mut self, e: usize) -> Result<()> {
        let window = self.cfg.candidate_window;
        let horizon = self.cfg.guard.unproductive_horizon;
        let mut any_productive = false;
        for r in self.requests.values_mut() {
            if r.source == RetrievalSource::Prefetch && r.issue_token < e && e - r.issue_token <= horizon && !r.productive {
                r.productive = true;
                any_productive = true;
            }
        }
        if any_productive {
            self.guard.on_productive();
        }
        if let Some(w) = self.waiting.take() {
            self.log.push(
                self.now,
                e,
                EventKind::Cancel {
                    request_id: None,
                    reason: "need reached".into(),
                },
            );
            self.resolve_deferrals(w, None)?;
        }

        let candidates: Vec<u64> = self
            .requests
            .iter()
            .filter(|(_, r)| {
                r.source == RetrievalSource::Prefetch && !r.consumed && !r.cancelled && r.issue_token < e && e - r.issue_token <= window
            })
            .map(|(id, _)| *id)
            .collect();
        let hit = candidates
            .iter()
            .rev()
            .copied()
            .filter(|id| self.requests[id].done && self.cache.contains(*id))
            .max_by_key(|id| (self.requests[id].issue_token, *id));
        if let Some(id) = hit {
            self.log.push(
                self.now,
                e,
                EventKind::CacheHit {
                    request_id: id,
                    via: Served::Prefetch,
                },
            );
            let entry = self.cache.get(id).expect("hit is cached");
            let docs = entry.embeddings.clone();
            let best = self.integrate(e, Served::Prefetch, &docs);
            let r = self.requests.get_mut(&id).expect("known request");
            r.consumed = true;
            if let Some((token, state)) = r.fetch.take() {
                let res = if best >= self.cfg.relevance_threshold {
                    Resolution::QualityImproving
                } else {
                    Resolution::Unused
                };
                self.reward(token, state, res, Route::QueryGen)?;
            }
            return Ok(());
        }
        if let Some(arm) = self.reuse.take() {
            self.log.push(
                self.now,
                e,
                EventKind::CacheHit {
                    request_id: arm.entry,
                    via: Served::Reuse,
                },
            );
            self.cache.get(arm.entry);
            let docs: Vec<Vec<f64>> = self.cache.entries().iter().flat_map(|c| c.embeddings.iter().cloned()).collect();
            let best = self.integrate(e, Served::Reuse, &docs);
            let ok = best >= self.cfg.relevance_threshold;
            let res = if ok { Resolution::Sufficient } else { Resolution::Insufficient };
            let route = Route::Sufficiency {
                e_c: arm.e_c,
                m: arm.m,
                label: ok,
            };
            self.reward(arm.token, arm.state, res, route)?;
            return Ok(());
        }

        let late = candidates
            .iter()
            .copied()
            .filter(|id| !self.requests[id].done)
            .max_by_key(|id| (self.requests[id].issue_token, *id));
        self.log.push(self.now, e, EventKind::CacheMiss { late_request: late });
        if let Some(id) = late {
            let r = self.requests.get_mut(&id).expect("known request");
            r.consumed = true;
            if let Some((token, state)) = r.fetch.take() {
                self.reward(token, state, Resolution::LateBlocking, Route::QueryGen)?;
            }
            // the blocking fallback supersedes it
            if self.cfg.mode.is_async() {
                self.cancel(id, e, "superseded by fallback");
            }
        }
        match self.cfg.mode {
            Mode::NoRetrieval => {
                self.integrate(e, Served::Nothing, &[]);
            }
            Mode::EntropyThreshold => self.pending_need = Some(e),
            _ => {
                self.fell_back.insert(e);
                let docs = self.sync_retrieve(e, self.context(e))?;
                self.integrate(e, Served::Sync, &docs);
            }
        }
        Ok(())
    }

    fn entropy_step(&mut self, i: usize) -> Result<()> {
        let Some(e) = self.pending_need else { return Ok(()) };
        if i <= e {
            return Ok(());
        }
        self.pending_need = None;
        let theta = self.cfg.prediction.theta;
        if self.trace.frames[i].entropy >= theta && self.trace.frames[i - 1].entropy >= theta {
            let docs = self.sync_retrieve(i, self.context(i))?;
            self.integrate(e, Served::Sync, &docs);
        } else {
            self.integrate(e, Served::Nothing, &[]);
        }
        Ok(())
    }

    fn interval_step(&mut self, i: usize) -> Result<()> {
        let every = self.cfg.fixed_interval;
        if !(i + 1).is_multiple_of(every) || i + 1 >= self.trace.len() {
            return Ok(());
        }
        let src = if self.cfg.mode == Mode::StaleQuery {
            (i + 1).saturating_sub(every)
        } else {
            i
        };
        let queries = self.focused(self.context(src), i);
        self.enqueue(i, i, queries, 1.0, None);
        Ok(())
    }

    fn oracle_step(&mut self, i: usize) -> Result<()> {
        let lead = self.cfg.oracle_lead();
        let due: Vec<usize> = self
            .needs
            .iter()
            .copied()
            .filter(|&e| e > i && e.saturating_sub(lead) == i)
            .collect();
        for e in due {
            let queries = self.focused(self.need_embedding(e), i);
            self.enqueue(i, i, queries, 1.0, None);
        }
        Ok(())
    }

    fn policy_cfg(&self) -> PolicyConfig {
        PolicyConfig {
            tau_rag: self.guard.effective_tau(self.cfg.prediction.tau_rag),
            sufficiency_skip: self.cfg.monitor.sufficiency_skip,
            clarity_ready: self.cfg.monitor.clarity_ready,
            ..self.cfg.policy
        }
    }

    fn decide(&mut self, state: &PolicyState, token: usize) -> Action {
        let mut rng = math::stream(self.seed, &[self.trace.id, EXPLORE_KEY, token as u64, self.explore_calls]);
        self.explore_calls += 1;
        policy::decide(&self.b().policy, state, &self.policy_cfg(), &mut rng)
    }

    fn cached_docs(&self) -> Vec<&[f64]> {
        self.cache
            .entries()
            .iter()
            .flat_map(|c| c.embeddings.iter().map(Vec::as_slice))
            .collect()
    }

    fn predictive_step(&mut self, i: usize, p_hat: Option<f64>) -> Result<()> {
        let tau = self.cfg.prediction.tau_rag;
        let frame = &self.trace.frames[i];
        let p = p_hat.unwrap_or(0.0);
        self.guard
            .observe(&self.cfg.guard, p, tau, frame.entropy, self.trace.is_suppressed(i));
        self.resolve_generates(Some(i))?;
        let signals = frame.scalars();
        if p_hat.is_some() && self.waiting.is_none() && p <= self.guard.effective_tau(tau) {
            let state = PolicyState {
                signals,
                p_hat: p,
                sufficiency: 0.0,
                clarity: 0.0,
                cache_size: self.cache.len(),
                cache_max_cos: monitor::cache_max_cos(self.context(i), &self.cached_docs()),
                tokens_since_last_retrieval: self.guard.tokens_since_last_retrieval,
                extensions_remaining: self.cfg.monitor.max_extensions,
            };
            self.generates.push_back((i, state));
        }

        if self.waiting.is_none() && can_trigger(&self.guard, &self.cfg.guard) {
            self.log.push(self.now, i, EventKind::Trigger { p_hat: p });
            let since_retrieval = self.guard.tokens_since_last_retrieval;
            self.guard.on_trigger();
            let e_c = self.context(i);
            let m = monitor::cache_max_cos(e_c, &self.cached_docs());
            let sufficiency = monitor::sufficiency_with_m(&self.b().monitor, e_c, m)?;
            let cs = ContextState::at(self.trace, i, 0)?;
            let state = PolicyState {
                signals,
                p_hat: p,
                sufficiency,
                clarity: monitor::clarity(&self.b().monitor, &cs.h_c),
                cache_size: self.cache.len(),
                cache_max_cos: m,
                tokens_since_last_retrieval: since_retrieval,
                extensions_remaining: self.cfg.monitor.max_extensions,
            };
            match self.decide(&state, i) {
                Action::Generate => {}
                Action::Reuse => self.arm_reuse(i, state, e_c.to_vec(), m),
                _ => {
                    let (_, k) = monitor::context_score(&self.b().monitor, &cs);
                    self.log.push(self.now, i, EventKind::Wait { k_star: k });
                    self.waiting = Some(Waiting {
                        trigger: i,
                        target: k,
                        extensions: 0,
                        confidence: p,
                        sufficiency,
                        cache_max_cos: m,
                        cache_size: self.cache.len(),
                        since_retrieval,
                        deferrals: Vec::new(),
                    });
                }
            }
        }
        if self.waiting.as_ref().is_some_and(|w| i - w.trigger >= w.target) {
            self.ready(i)?;
        }
        Ok(())
    }

    fn arm_reuse(&mut self, i: usize, state: PolicyState, e_c: Vec<f64>, m: f64) {
        let entry = self
            .cache
            .entries()
            .iter()
            .map(|c| {
                (
                    c.request_id,
                    monitor::cache_max_cos(&e_c, &c.embeddings.iter().map(Vec::as_slice).collect::<Vec<_>>()),
                )
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id);
        self.log.push(
            self.now,
            i,
            EventKind::Skip {
                sufficiency: state.sufficiency,
                cache_entry: entry,
            },
        );
        if let Some(entry) = entry {
            self.reuse = Some(ReuseArm {
                token: i,
                entry,
                state,
                e_c,
                m,
            });
        }
    }

    /// The wait reached its target: check clarity and extend or fetch.
    fn ready(&mut self, i: usize) -> Result<()> {
        let w = self.waiting.as_ref().expect("waiting");
        let since = i - w.trigger;
        let cs = ContextState::at(self.trace, i, since.min(monitor::SINCE_SLOTS - 1))?;
        let state = PolicyState {
            signals: self.trace.frames[i].scalars(),
            p_hat: w.confidence,
            sufficiency: w.sufficiency,
            clarity: monitor::clarity(&self.b().monitor, &cs.h_c),
            cache_size: w.cache_size,
            cache_max_cos: w.cache_max_cos,
            tokens_since_last_retrieval: w.since_retrieval,
            extensions_remaining: self.cfg.monitor.max_extensions - w.extensions,
        };
        match self.decide(&state, i) {
            Action::Accumulate => {
                self.log.push(self.now, i, EventKind::Extend { clarity: state.clarity });
                let w = self.waiting.as_mut().expect("waiting");
                w.target += 1;
                w.extensions += 1;
                w.deferrals.push((i, state, cs.h_c));
            }
            Action::Fetch => {
                let w = self.waiting.take().expect("waiting");
                let queries = self.env.queries.build_queries(self.context(i), i, w.confidence)?;
                self.enqueue(i, w.trigger, queries, w.confidence, Some((i, state)));
                self.resolve_deferrals(w, Some(i))?;
            }
            Action::Reuse => {
                let w = self.waiting.take().expect("waiting");
                self.arm_reuse(i, state, self.context(i).to_vec(), w.cache_max_cos);
                self.resolve_deferrals(w, None)?;
            }
            Action::Generate => {
                let w = self.waiting.take().expect("waiting");
                self.resolve_deferrals(w, None)?;
            }
        }
        Ok(())
    }

    /// Accumulate pays off when the issued query is closer to the next need
    /// than the deferred one and the whole wait stayed within the cap.
    fn resolve_deferrals(&mut self, w: Waiting, issued: Option<usize>) -> Result<()> {
        let need = self
            .trace
            .events
            .iter()
            .find(|ev| ev.position > w.trigger)
            .map(|ev| ev.need_embedding.clone());
        for (token, state, h) in w.deferrals {
            let improved = match (issued, &need) {
                (Some(at), Some(need)) => {
                    at - w.trigger <= monitor::MAX_WAIT && math::cosine(self.context(at), need) > math::cosine(self.context(token), need)
                }
                _ => false,
            };
            let (res, target) = if improved {
                (Resolution::ImprovedQuery, 0.0)
            } else {
                (Resolution::ExcessiveDelay, 1.0)
            };
            self.reward(token, state, res, Route::Clarity { h, target })?;
        }
        Ok(())
    }

    /// Resolve Generate decisions whose horizon has passed, or all at the end.
    fn resolve_generates(&mut self, now_token: Option<usize>) -> Result<()> {
        let horizon = self.cfg.prediction.horizon;
        while let Some(&(t, _)) = self.generates.front() {
            if now_token.is_some_and(|i| t + horizon > i) {
                break;
            }
            let (t, state) = self.generates.pop_front().expect("front");
            let missed = self.fell_back.range(t + 1..=t + horizon).next().is_some();
            let res = if missed {
                Resolution::MissedOpportunity
            } else {
                Resolution::QualityMaintained
            };
            self.reward(t, state, res, Route::Predictor { token: t, label: missed })?;
        }
        Ok(())
    }

    /// Per-token bookkeeping shared by the prefetching modes.
    fn expire(&mut self, i: usize) -> Result<()> {
        let horizon = self.cfg.guard.unproductive_horizon;
        let window = self.cfg.candidate_window;
        let mut unproductive = false;
        let mut unused = Vec::new();
        for r in self.requests.values_mut() {
            if r.source != RetrievalSource::Prefetch {
                continue;
            }
            if r.issue_token + horizon == i && !r.productive {
                unproductive = true;
            }
            if r.issue_token + window == i && !r.consumed {
                if let Some(f) = r.fetch.take() {
                    unused.push(f);
                }
            }
        }
        if unproductive && self.cfg.mode == Mode::Predictive {
            self.guard.on_unproductive(&self.cfg.guard);
        }
        for (token, state) in unused {
            self.reward(token, state, Resolution::Unused, Route::QueryGen)?;
        }
        if self.reuse.as_ref().is_some_and(|a| i >= a.token + self.cfg.reuse_horizon) {
            let arm = self.reuse.take().expect("armed");
            let route = Route::Sufficiency {
                e_c: arm.e_c,
                m: arm.m,
                label: true,
            };
            self.reward(arm.token, arm.state, Resolution::Sufficient, route)?;
        }
        Ok(())
    }

    /// Withdraw an unfinished request, freeing its worker.
    fn cancel(&mut self, id: u64, token: usize, reason: &str) {
        if let Some(k) = self.inflight.iter().position(|f| f.id == id) {
            let f = self.inflight.swap_remove(k);
            if let Some(w) = f.worker {
                self.worker_busy[w] = false;
                if let Some(next) = self.queue.dequeue() {
                    self.start(next.request_id, self.now, token, Some(w));
                }
            }
        } else if !self.queue.remove(id) {
            return;
        }
        self.requests.get_mut(&id).expect("known request").cancelled = true;
        self.log.push(
            self.now,
            token,
            EventKind::Cancel {
                request_id: Some(id),
                reason: reason.into(),
            },
        );
    }

    fn finish_query(&mut self, last: usize) -> Result<()> {
        if let Some(e) = self.pending_need.take() {
            self.integrate(e, Served::Nothing, &[]);
        }
        if let Some(w) = self.waiting.take() {
            self.log.push(
                self.now,
                last,
                EventKind::Cancel {
                    request_id: None,
                    reason: "end of query".into(),
                },
            );
            self.resolve_deferrals(w, None)?;
        }
        let mut open: Vec<u64> = self.inflight.drain(..).map(|f| f.id).collect();
        open.extend(self.queue.drain().into_iter().map(|r| r.request_id));
        open.sort_unstable();
        for id in open {
            self.requests.get_mut(&id).expect("known request").cancelled = true;
            self.log.push(
                self.now,
                last,
                EventKind::Cancel {
                    request_id: Some(id),
                    reason: "end of query".into(),
                },
            );
        }
        let unused: Vec<(usize, PolicyState)> = self.requests.values_mut().filter_map(|r| r.fetch.take()).collect();
        for (token, state) in unused {
            self.reward(token, state, Resolution::Unused, Route::QueryGen)?;
        }
        if let Some(arm) = self.reuse.take() {
            let route = Route::Sufficiency {
                e_c: arm.e_c,
                m: arm.m,
                label: true,
            };
            self.reward(arm.token, arm.state, Resolution::Sufficient, route)?;
        }
        self.resolve_generates(None)?;
        self.log.push(self.now, last, EventKind::QueryEnd);
        Ok(())
    }

    fn reward(&mut self, token: usize, state: PolicyState, res: Resolution, route: Route) -> Result<()> {
        let ev = RewardEvent::new(self.trace.id, token, state, res, &self.cfg.rewards);
        if self.cfg.online_updates {
            let pcfg = self.policy_cfg();
            let lr = self.cfg.online_lr;
            let window = match route {
                Route::Predictor { token, .. } => Some(predictor::window_at(self.trace, token)?),
                _ => None,
            };
            let b = self.bundle.as_mut().expect("predictive bundle").to_mut();
            match policy::update(&mut b.policy, &ev.state, ev.action, ev.reward, &pcfg) {
                Ok(()) | Err(Error::OffPolicy { .. }) => {}
                Err(e) => return Err(e),
            }
            match route {
                Route::Predictor { label, .. } => predictor::sgd_step(&mut b.predictor, &window.expect("window"), label, lr)?,
                Route::Sufficiency { e_c, m, label } => monitor::sufficiency_step(&mut b.monitor, &e_c, m, label, lr),
                Route::Clarity { h, target } => monitor::clarity_step(&mut b.monitor, &h, target, lr),
                Route::QueryGen => {}
            }
        }
        self.rewards.push(ev);
        Ok(())
    }
}

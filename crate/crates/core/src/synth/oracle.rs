//! Oracle labels from paired with/without-retrieval simulation.

use serde::{Deserialize, Serialize};

use super::{EventClass, Trace};
use crate::math;
use crate::retriever::{ScoredDoc, SimRetriever};

pub const WAITS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Cosine to the need at or above which a document counts as relevant.
    pub relevance_threshold: f64,
    pub clarity_complete: f64,
    pub clarity_incomplete: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            relevance_threshold: 0.6,
            clarity_complete: 0.95,
            clarity_incomplete: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub trace_id: u64,
    pub position: usize,
    pub event_class: EventClass,
    pub is_positive: bool,
    /// quality_with - quality_without.
    pub utility: f64,
    /// Query quality after waiting k = 0..5 tokens; positives only.
    pub wait_qualities: Option<[f64; WAITS]>,
    pub sufficiency_label: bool,
    pub clarity_score: f64,
    /// Max cosine between the crossing context and earlier retrieved docs,
    /// -1 when nothing was retrieved yet.
    pub cache_max_cos: f64,
}

impl LabeledInstance {
    /// Smallest k with the highest wait quality.
    pub fn best_wait(&self) -> Option<usize> {
        self.wait_qualities.map(|q| argmax_first(&q))
    }
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn topic_quality(docs: &[ScoredDoc], retriever: &SimRetriever, topic: usize, need: &[f64]) -> f64 {
    docs.iter()
        .filter(|d| d.topic_id == topic)
        .map(|d| math::dot(&retriever.doc(d.doc_id).embedding, need))
        .fold(0.0, f64::max)
}

/// One instance per entropy crossing that carries an event.
///
/// Crossings are visited in order. At each one a focused query built from the
/// crossing context is ranked against the corpus; `quality_with` is the best
/// topic-matching cosine to the need among those docs and `quality_without`
/// the same over docs retrieved at earlier crossings.
pub fn label_oracle(trace: &Trace, retriever: &SimRetriever, cfg: &LabelConfig) -> Vec<LabeledInstance> {
    let n = trace.len();
    let mut context_docs: Vec<ScoredDoc> = Vec::new();
    let mut out = Vec::new();
    for pos in trace.crossings() {
        let Some(ev) = trace.event_at(pos) else { continue };
        let need = &ev.need_embedding;
        let ctx = &trace.context_embeddings[pos];

        let cache_max_cos = context_docs
            .iter()
            .map(|d| math::dot(&retriever.doc(d.doc_id).embedding, ctx))
            .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
            .unwrap_or(-1.0);

        let retrieved = retriever.rank(ctx, retriever.k_docs);
        let with = topic_quality(&retrieved, retriever, ev.topic_id, need);
        let without = topic_quality(&context_docs, retriever, ev.topic_id, need);
        let utility = with - without;
        let is_positive = utility > 0.0;

        let wait_qualities = is_positive.then(|| {
            let mut q = [0.0; WAITS];
            for (k, slot) in q.iter_mut().enumerate() {
                let t = (pos + k).min(n - 1);
                *slot = math::dot(&trace.context_embeddings[t], need).clamp(0.0, 1.0);
            }
            q
        });
        let k_star = wait_qualities.map_or(0, |q| argmax_first(&q));
        let t_clarity = (pos + k_star).min(n - 1);
        let clarity_score = if trace.phrase_complete[t_clarity] {
            cfg.clarity_complete
        } else {
            cfg.clarity_incomplete
        };

        out.push(LabeledInstance {
            trace_id: trace.id,
            position: pos,
            event_class: ev.event_class,
            is_positive,
            utility,
            wait_qualities,
            sufficiency_label: without >= cfg.relevance_threshold,
            clarity_score,
            cache_max_cos,
        });
        context_docs.extend(retrieved);
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::retriever::{Corpus, CorpusConfig, LatencyModel};
    use crate::synth::{synth_trace, EventSpec, SynthConfig, World};

    fn retriever_for(cfg: &SynthConfig, uncovered: Vec<usize>) -> SimRetriever {
        let world = World::from_config(cfg);
        let ccfg = CorpusConfig {
            uncovered_topics: uncovered,
            ..Default::default()
        };
        let corpus = Corpus::generate(&world, &ccfg, 9);
        SimRetriever::new(Arc::new(corpus), LatencyModel::default(), 5).unwrap()
    }

    fn cfg_with(events: Vec<EventSpec>) -> SynthConfig {
        SynthConfig {
            n_tokens: 100,
            events: Some(events),
            ..Default::default()
        }
    }

    #[test]
    fn covered_topic_is_positive() {
        let cfg = cfg_with(vec![EventSpec::at(30).topic(2)]);
        let tr = synth_trace(&cfg, 1).unwrap();
        let out = label_oracle(&tr, &retriever_for(&cfg, vec![]), &LabelConfig::default());
        assert_eq!(out.len(), 1);
        assert!(out[0].is_positive);
        let q = out[0].wait_qualities.unwrap();
        assert!(q.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(out[0].cache_max_cos, -1.0);
        assert!(!out[0].sufficiency_label);
    }

    #[test]
    fn uncovered_topic_is_negative() {
        let cfg = cfg_with(vec![EventSpec::at(30).topic(2)]);
        let tr = synth_trace(&cfg, 1).unwrap();
        let out = label_oracle(&tr, &retriever_for(&cfg, vec![2]), &LabelConfig::default());
        assert_eq!(out.len(), 1);
        assert!(!out[0].is_positive);
        assert_eq!(out[0].utility, 0.0);
        assert!(out[0].wait_qualities.is_none());
    }

    #[test]
    fn factual_peaks_at_three_or_four() {
        for seed in 0..10 {
            let cfg = cfg_with(vec![EventSpec::at(30).class(EventClass::Factual)]);
            let tr = synth_trace(&cfg, seed).unwrap();
            let out = label_oracle(&tr, &retriever_for(&cfg, vec![]), &LabelConfig::default());
            let k = out[0].best_wait().unwrap();
            assert!(k == 3 || k == 4, "seed {seed}: k* = {k}");
        }
    }

    #[test]
    fn redundant_event_is_sufficient() {
        let mut red = EventSpec::at(70);
        red.redundant = true;
        let cfg = cfg_with(vec![EventSpec::at(25), red]);
        let tr = synth_trace(&cfg, 3).unwrap();
        let out = label_oracle(&tr, &retriever_for(&cfg, vec![]), &LabelConfig::default());
        assert_eq!(out.len(), 2);
        assert!(out[1].sufficiency_label);
        assert!(out[1].cache_max_cos > 0.3);
    }

    #[test]
    fn noiseless_profiles_saturate_monotonically() {
        let cfg = SynthConfig {
            noiseless: true,
            ..Default::default()
        };
        let r = retriever_for(&cfg, vec![]);
        for seed in 0..10 {
            let tr = synth_trace(&cfg, seed).unwrap();
            for inst in label_oracle(&tr, &r, &LabelConfig::default()) {
                let Some(q) = inst.wait_qualities else { continue };
                let ev = tr.event_at(inst.position).unwrap();
                let horizon = ev.optimal_wait.min(tr.len() - 1 - inst.position);
                for k in 0..horizon {
                    assert!(q[k + 1] >= q[k], "seed {seed} pos {}: {q:?}", inst.position);
                }
            }
        }
    }
}

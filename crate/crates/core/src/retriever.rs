//! In-process retrieval backend over a synthetic embedding corpus.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, gauss};
use crate::synth::World;

/// Upper standard-normal quantile at 0.95.
pub const Z95: f64 = 1.6449;

pub const LATENCY_FLOOR_MS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: usize,
    pub topic_id: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub docs_per_topic: usize,
    /// Norm of the isotropic noise added to a topic prototype per document.
    pub doc_noise: f64,
    /// Topics that receive no documents.
    pub uncovered_topics: Vec<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            docs_per_topic: 8,
            doc_noise: 0.45,
            uncovered_topics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn generate(world: &World, cfg: &CorpusConfig, seed: u64) -> Self {
        let mut rng = math::stream(seed, &[0xc0, 0x01]);
        let dim = world.emb_dim();
        let scale = cfg.doc_noise / (dim as f64).sqrt();
        let mut docs = Vec::new();
        for (topic, proto) in world.prototypes.iter().enumerate() {
            if cfg.uncovered_topics.contains(&topic) {
                continue;
            }
            for _ in 0..cfg.docs_per_topic {
                let v: Vec<f64> = proto.iter().map(|p| p + scale * gauss(&mut rng)).collect();
                docs.push(Document {
                    doc_id: docs.len(),
                    topic_id: topic,
                    embedding: math::normalized(&v).expect("non-zero document"),
                });
            }
        }
        Corpus { docs }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn has_topic(&self, topic: usize) -> bool {
        self.docs.iter().any(|d| d.topic_id == topic)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for d in &self.docs {
            let line = serde_json::to_string(d).expect("document serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn import(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if !math::is_unit(&d.embedding, 1e-6) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "document embedding is not unit norm".into(),
                });
            }
            docs.push(d);
        }
        Ok(Corpus { docs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Fit a lognormal to a median and 95th percentile.
pub fn fit_lognormal(median_ms: f64, p95_ms: f64) -> Result<LogNormalParams> {
    if !(median_ms > 0.0 && p95_ms > median_ms && p95_ms.is_finite()) {
        return Err(Error::Invalid(format!(
            "lognormal fit needs p95 > median > 0 (median {median_ms}, p95 {p95_ms})"
        )));
    }
    Ok(LogNormalParams {
        mu: median_ms.ln(),
        sigma: (p95_ms.ln() - median_ms.ln()) / Z95,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LatencyModel {
    LogNormal { median_ms: f64, p95_ms: f64 },
    Fixed { ms: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::LogNormal {
            median_ms: 125.0,
            p95_ms: 180.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LatencyModel::LogNormal { median_ms, p95_ms } => fit_lognormal(median_ms, p95_ms).map(|_| ()),
            LatencyModel::Fixed { ms } if ms > 0.0 && ms.is_finite() => Ok(()),
            LatencyModel::Fixed { ms } => Err(Error::Invalid(format!("fixed latency {ms} must be > 0"))),
        }
    }

    pub fn median_ms(&self) -> f64 {
        match *self {
            LatencyModel::LogNormal { median_ms, .. } => median_ms,
            LatencyModel::Fixed { ms } => ms,
        }
    }

    /// Latency for a standard-normal draw `z`. Monotone in `z`, so streams
    /// shared across models keep their ordering.
    pub fn from_z(&self, z: f64) -> f64 {
        let v = match *self {
            LatencyModel::LogNormal { median_ms, p95_ms } => {
                let p = fit_lognormal(median_ms, p95_ms).expect("validated latency model");
                (p.mu + p.sigma * z).exp()
            }
            LatencyModel::Fixed { ms } => ms,
        };
        v.max(LATENCY_FLOOR_MS)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.from_z(gauss(rng))
    }

    /// Same shape, scaled to a new median (p95/median ratio preserved).
    pub fn with_median(&self, median: f64) -> Self {
        match *self {
            LatencyModel::LogNormal { median_ms, p95_ms } => LatencyModel::LogNormal {
                median_ms: median,
                p95_ms: median * p95_ms / median_ms,
            },
            LatencyModel::Fixed { .. } => LatencyModel::Fixed { ms: median },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: usize,
    pub topic_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub docs: Vec<ScoredDoc>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SimRetriever {
    pub corpus: Arc<Corpus>,
    pub latency: LatencyModel,
    pub k_docs: usize,
}

impl SimRetriever {
    pub fn new(corpus: Arc<Corpus>, latency: LatencyModel, k_docs: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        if k_docs == 0 {
            return Err(Error::Invalid("k_docs must be >= 1".into()));
        }
        latency.validate()?;
        Ok(Self { corpus, latency, k_docs })
    }

    pub fn doc(&self, id: usize) -> &Document {
        &self.corpus.docs[id]
    }

    /// Top-k by cosine; ties go to the smaller doc id.
    pub fn rank(&self, query: &[f64], k: usize) -> Vec<ScoredDoc> {
        let mut scored: Vec<ScoredDoc> = self
            .corpus
            .docs
            .iter()
            .map(|d| ScoredDoc {
                doc_id: d.doc_id,
                topic_id: d.topic_id,
                score: math::dot(query, &d.embedding),
            })
            .collect();
        sort_ranked(&mut scored);
        scored.truncate(k);
        scored
    }

    /// Union of per-variant top-k, deduplicated (best score kept), re-ranked
    /// and truncated to k.
    pub fn rank_group(&self, queries: &[&[f64]], k: usize) -> Vec<ScoredDoc> {
        let mut all: Vec<ScoredDoc> = Vec::new();
        for q in queries {
            for d in self.rank(q, k) {
                match all.iter_mut().find(|x| x.doc_id == d.doc_id) {
                    Some(x) if x.score < d.score => *x = d,
                    Some(_) => {}
                    None => all.push(d),
                }
            }
        }
        sort_ranked(&mut all);
        all.truncate(k);
        all
    }

    /// Rank documents for a query group and draw a latency from `rng`.
    pub fn retrieve(&self, queries: &[&[f64]], rng: &mut impl Rng) -> Result<Retrieval> {
        if queries.is_empty() {
            return Err(Error::Empty("query group"));
        }
        Ok(Retrieval {
            docs: self.rank_group(queries, self.k_docs),
            latency_ms: self.latency.sample(rng),
        })
    }
}

fn sort_ranked(v: &mut [ScoredDoc]) {
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
}

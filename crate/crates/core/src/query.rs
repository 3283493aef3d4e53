//! Extractive query construction in embedding space.
//!
//! The retrieval confidence picks a strategy: a single focused query, a small
//! fan of perturbed variants, or one query widened toward the nearest topic
//! centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Focused,
    Exploratory,
    Broad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub embedding: Vec<f64>,
    pub strategy: Strategy,
    pub origin_token: usize,
    pub variant_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Confidence strictly above this is Focused.
    pub focused_above: f64,
    /// Confidence at or below this is Broad.
    pub broad_at_or_below: f64,
    pub angle_deg: f64,
    /// Exploratory variants, 2 or 3.
    pub variants: usize,
    pub broad_blend: f64,
    pub direction_seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            focused_above: 0.8,
            broad_at_or_below: 0.5,
            angle_deg: 15.0,
            variants: 3,
            broad_blend: 0.5,
            direction_seed: 0x0a11_0e5d,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.broad_at_or_below && self.broad_at_or_below < self.focused_above && self.focused_above <= 1.0) {
            return Err(Error::Config("query thresholds must satisfy 0 <= broad < focused <= 1".into()));
        }
        if !(2..=3).contains(&self.variants) {
            return Err(Error::Config("query.variants must be 2 or 3".into()));
        }
        if !(self.angle_deg > 0.0 && self.angle_deg < 90.0) {
            return Err(Error::Config("query.angle_deg must lie in (0, 90)".into()));
        }
        if !(self.broad_blend > 0.0 && self.broad_blend < 1.0) {
            return Err(Error::Config("query.broad_blend must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn strategy_for(&self, confidence: f64) -> Strategy {
        if confidence > self.focused_above {
            Strategy::Focused
        } else if confidence > self.broad_at_or_below {
            Strategy::Exploratory
        } else {
            Strategy::Broad
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryBuilder {
    cfg: QueryConfig,
    /// Fixed perturbation directions, one spare in case one is parallel to the context.
    directions: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
}

impl QueryBuilder {
    /// `centroids` are unit topic centroids used by the Broad strategy.
    pub fn new(cfg: QueryConfig, emb_dim: usize, centroids: Vec<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        if emb_dim < cfg.variants + 2 {
            return Err(Error::Config(format!("embedding dim {emb_dim} too small for query variants")));
        }
        if centroids.iter().any(|c| c.len() != emb_dim) {
            return Err(Error::Invalid("centroid dimension mismatch".into()));
        }
        let mut rng = math::stream(cfg.direction_seed, &[emb_dim as u64]);
        let directions = (0..cfg.variants + 1).map(|_| math::random_unit(&mut rng, emb_dim)).collect();
        Ok(QueryBuilder {
            cfg,
            directions,
            centroids,
        })
    }

    pub fn config(&self) -> &QueryConfig {
        &self.cfg
    }

    pub fn build_queries(&self, context: &[f64], origin_token: usize, confidence: f64) -> Result<Vec<Query>> {
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context embedding"));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        let e = math::normalized(context).ok_or(Error::Invalid("zero context embedding".into()))?;
        let strategy = self.cfg.strategy_for(confidence);
        let q = |embedding, variant_index| Query {
            embedding,
            strategy,
            origin_token,
            variant_index,
        };
        Ok(match strategy {
            Strategy::Focused => vec![q(e, 0)],
            Strategy::Exploratory => self.variants(&e).into_iter().enumerate().map(|(i, v)| q(v, i)).collect(),
            Strategy::Broad => vec![q(self.widen(&e), 0)],
        })
    }

    fn variants(&self, e: &[f64]) -> Vec<Vec<f64>> {
        let a = self.cfg.angle_deg.to_radians();
        let mut out = Vec::with_capacity(self.cfg.variants);
        let mut basis: Vec<Vec<f64>> = vec![e.to_vec()];
        for d in &self.directions {
            if out.len() == self.cfg.variants {
                break;
            }
            // Gram-Schmidt against the context and earlier directions keeps the
            // variants distinct and each exactly `a` away from the context.
            let mut u = d.clone();
            for b in &basis {
                u = math::reject(&u, b);
            }
            if math::norm(&u) < 1e-6 {
                continue;
            }
            let u = math::normalized(&u).expect("nonzero residual");
            let v: Vec<f64> = e.iter().zip(&u).map(|(x, y)| a.cos() * x + a.sin() * y).collect();
            out.push(math::normalized(&v).expect("unit combination"));
            basis.push(u);
        }
        out
    }

    fn widen(&self, e: &[f64]) -> Vec<f64> {
        let Some(c) = self.centroids.iter().max_by(|a, b| math::dot(a, e).total_cmp(&math::dot(b, e))) else {
            return e.to_vec();
        };
        let w = self.cfg.broad_blend;
        let v: Vec<f64> = e.iter().zip(c).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        math::normalized(&v).unwrap_or_else(|| e.to_vec())
    }
}

/// Query-retrieval similarity: mean cosine to the docs, clipped to [0, 1].
pub fn qrs(query: &[f64], docs: &[&[f64]]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Empty("retrieved docs"));
    }
    let m = docs.iter().map(|d| math::cosine(query, d)).sum::<f64>() / docs.len() as f64;
    Ok(m.clamp(0.0, 1.0))
}

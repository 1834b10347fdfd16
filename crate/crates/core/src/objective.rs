//! Circle-style contrastive loss over span representations.
//!
//! For an anchor `s` with positives `s+` and negatives `s-`:
//!
//! ```text
//! loss = log(1 + e^lambda * sum_i exp(-tau cos(s, s+_i)) * sum_j exp(tau cos(s, s-_j)))
//!      = softplus(LSE_i(lambda - tau cos(s, s+_i)) + LSE_j(tau cos(s, s-_j)))
//! ```
//!
//! The second form is what gets evaluated, so large `tau` and `lambda` never
//! overflow. With `lambda = 0` the two are the same function. No negatives
//! means an empty sum, and the loss is exactly zero.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, softplus, Graph, Tensor, Var};
use crate::corpus::NON_ENTITY;
use crate::error::Result;

const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OPairPolicy {
    /// Non-entity spans are never anchors or positives, only negatives.
    #[default]
    #[serde(rename = "O_AS_NEGATIVE_ONLY")]
    NegativeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub o_pair_policy: OPairPolicy,
    pub max_negatives_per_anchor: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 10.0,
            lambda: 30.0,
            o_pair_policy: OPairPolicy::NegativeOnly,
            max_negatives_per_anchor: 64,
        }
    }
}

impl LossConfig {
    /// The "no bias in loss" ablation.
    pub fn without_bias(self) -> Self {
        LossConfig { lambda: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan()
            || self.tau <= 0.0
            || self.lambda.is_nan()
            || self.lambda < 0.0
            || self.max_negatives_per_anchor == 0
        {
            return Err(crate::Error::Config(format!(
                "need tau > 0, lambda >= 0, negative cap > 0 (got {}, {}, {})",
                self.tau, self.lambda, self.max_negatives_per_anchor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either input had zero norm.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Similarity {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Similarity {
        value: dot / (na * nb).max(COSINE_EPS),
        degenerate: na == 0.0 || nb == 0.0,
    }
}

/// Indices into the span list the pairs were built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairs {
    pub sets: Vec<PairSet>,
    /// Entity anchors dropped because no other span shares their label.
    pub skipped_anchors: usize,
}

impl Pairs {
    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// One pair set per entity-labeled span. Negatives beyond the cap are
/// subsampled without replacement, seeded by `(seed, anchor)`, and kept in
/// ascending index order.
pub fn build_pairs<S: AsRef<str>>(labels: &[S], config: &LossConfig, seed: u64) -> Pairs {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(l.as_ref()).or_default().push(i);
    }
    let mut pairs = Pairs::default();
    for (anchor, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        if label == NON_ENTITY {
            continue;
        }
        let positives: Vec<usize> = by_label[label].iter().copied().filter(|&j| j != anchor).collect();
        if positives.is_empty() {
            pairs.skipped_anchors += 1;
            continue;
        }
        let mut negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j].as_ref() != label).collect();
        let cap = config.max_negatives_per_anchor;
        if negatives.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ anchor as u64);
            let mut picked: Vec<usize> = sample(&mut rng, negatives.len(), cap)
                .into_iter()
                .map(|k| negatives[k])
                .collect();
            picked.sort_unstable();
            negatives = picked;
        }
        pairs.sets.push(PairSet {
            anchor,
            positives,
            negatives,
        });
    }
    pairs
}

/// Loss of one anchor from its cosine similarities.
pub fn circle_loss_value(positive_cos: &[f64], negative_cos: &[f64], config: &LossConfig) -> f64 {
    if negative_cos.is_empty() {
        return 0.0;
    }
    let pos: Vec<f64> = positive_cos.iter().map(|c| config.lambda - config.tau * c).collect();
    let neg: Vec<f64> = negative_cos.iter().map(|c| config.tau * c).collect();
    softplus(log_sum_exp(&pos) + log_sum_exp(&neg))
}

/// Mean circle loss over `pairs`, as a scalar graph node. `reps` holds one
/// span vector per row. Returns `None` when there are no pair sets.
pub fn circle_loss(g: &mut Graph, reps: Var, pairs: &Pairs, config: &LossConfig) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let count = g.value(reps).shape()[0];
    let unit = g.l2_normalize(reps, COSINE_EPS)?;
    let anchors: Vec<usize> = pairs.sets.iter().map(|p| p.anchor).collect();
    let anchor_rows = g.rows(unit, &anchors)?;
    let all_t = g.transpose(unit)?;
    let cos = g.matmul(anchor_rows, all_t)?;
    let mut terms = Vec::with_capacity(pairs.sets.len());
    for (k, set) in pairs.sets.iter().enumerate() {
        let term = if set.negatives.is_empty() {
            g.constant(Tensor::vector(vec![0.0]))
        } else {
            let pos_idx: Vec<usize> = set.positives.iter().map(|&j| k * count + j).collect();
            let neg_idx: Vec<usize> = set.negatives.iter().map(|&j| k * count + j).collect();
            let pos = g.gather(cos, &pos_idx)?;
            let pos = g.scale(pos, -config.tau);
            let pos = g.add_scalar(pos, config.lambda);
            let lse_pos = g.log_sum_exp(pos)?;
            let neg = g.gather(cos, &neg_idx)?;
            let neg = g.scale(neg, config.tau);
            let lse_neg = g.log_sum_exp(neg)?;
            let inner = g.add(lse_pos, lse_neg)?;
            let loss = g.softplus(inner);
            g.reshape(loss, &[1])?
        };
        terms.push(term);
    }
    let stacked = g.concat(&terms, 0)?;
    Ok(Some(g.mean_axis(stacked, 0)?))
}

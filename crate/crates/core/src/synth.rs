//! Generated corpora for tests, examples and smoke runs. Paired with
//! [`crate::embedkit::SyntheticEmbeddings`] and a class signal, every label
//! is separable by construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::AdamConfig;
use crate::corpus::{Sentence, SpanAnnotation};
use crate::embedkit::{orthogonal_signals, EmbeddingSource};
use crate::error::{Error, Result};
use crate::model::BclConfig;
use crate::objective::LossConfig;
use crate::protocol::{Selection, TrainPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSpec {
    pub labels: Vec<String>,
    pub sentences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_entities: usize,
    pub max_entity_len: usize,
    /// Chance that a multi-token entity also carries a nested one-token
    /// entity of a different label on its first token.
    pub nested_rate: f64,
    /// Prefix for sentence ids, so pools drawn for different roles never
    /// collide.
    pub id_prefix: String,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            labels: label_names(10),
            sentences: 200,
            min_tokens: 5,
            max_tokens: 8,
            max_entities: 2,
            max_entity_len: 2,
            nested_rate: 0.0,
            id_prefix: "syn".into(),
        }
    }
}

pub fn label_names(count: usize) -> Vec<String> {
    (0..count).map(|k| format!("L{k}")).collect()
}

/// Random sentences whose entities never touch: each entity is followed by
/// at least one non-entity token. Label choice cycles through a shuffled
/// order so every label ends up with a similar number of spans.
pub fn synthetic_pool(spec: &PoolSpec, seed: u64) -> Result<Vec<Sentence>> {
    if spec.labels.is_empty() || spec.min_tokens == 0 || spec.max_tokens < spec.min_tokens {
        return Err(Error::Config(
            "pool spec needs labels and 0 < min_tokens <= max_tokens".into(),
        ));
    }
    if spec.max_entity_len == 0 || spec.max_entity_len + 1 > spec.min_tokens {
        return Err(Error::Config(format!(
            "entities of up to {} tokens do not fit sentences of {} tokens",
            spec.max_entity_len, spec.min_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bag: Vec<usize> = Vec::new();
    let mut next_label = |rng: &mut ChaCha8Rng| {
        if bag.is_empty() {
            bag = (0..spec.labels.len()).collect();
            bag.shuffle(rng);
        }
        bag.pop().expect("refilled")
    };
    let mut out = Vec::with_capacity(spec.sentences);
    for i in 0..spec.sentences {
        let n = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let tokens = (0..n).map(|t| format!("w{t}")).collect();
        let want = rng.gen_range(1..=spec.max_entities.max(1));
        let mut annotations = Vec::new();
        let mut cursor = 1;
        for _ in 0..want {
            let len = rng.gen_range(1..=spec.max_entity_len);
            if cursor + len > n {
                break;
            }
            let start = rng.gen_range(cursor..=n - len);
            let end = start + len - 1;
            let label = next_label(&mut rng);
            annotations.push(SpanAnnotation::new(start, end, spec.labels[label].clone()));
            if len > 1 && spec.labels.len() > 1 && rng.gen_bool(spec.nested_rate) {
                let mut inner = next_label(&mut rng);
                if inner == label {
                    inner = (inner + 1) % spec.labels.len();
                }
                annotations.push(SpanAnnotation::new(start, start, spec.labels[inner].clone()));
            }
            cursor = end + 2;
        }
        out.push(Sentence::new(format!("{}-{i}", spec.id_prefix), tokens, annotations)?);
    }
    Ok(out)
}

/// Orthogonal class signals of the given length, one per label.
pub fn class_signals(labels: &[String], d: usize, amplitude: f64) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut signals = orthogonal_signals(labels.iter().map(String::as_str), d)?;
    for v in signals.values_mut() {
        v.iter_mut().for_each(|x| *x *= amplitude);
    }
    Ok(signals)
}

/// Everything needed for a train / adapt / predict run on generated data.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub labels: Vec<String>,
    pub train: Vec<Sentence>,
    /// Separate sentences over the same labels, for held-out episodes.
    pub test: Vec<Sentence>,
    pub source: EmbeddingSource,
    pub plan: TrainPlan,
}

/// Ten labels, `d = 32`, one-token entities that never touch, and a class
/// signal of amplitude 5 on top of token noise in `[-1, 1]`, so every
/// entity token is separable from every other token. Training runs 200
/// 5-way 5-shot episodes with `h = r = 16`.
pub fn separable_benchmark(seed: u64) -> Result<Benchmark> {
    let labels = label_names(10);
    let d = 32;
    let spec = PoolSpec {
        labels: labels.clone(),
        max_entity_len: 1,
        ..PoolSpec::default()
    };
    let train = synthetic_pool(
        &PoolSpec {
            sentences: 300,
            id_prefix: "train".into(),
            ..spec.clone()
        },
        seed,
    )?;
    let test = synthetic_pool(
        &PoolSpec {
            sentences: 200,
            id_prefix: "test".into(),
            ..spec
        },
        seed.wrapping_add(1),
    )?;
    let source = EmbeddingSource::synthetic(seed, d, Some(class_signals(&labels, d, 5.0)?))?;
    let plan = TrainPlan {
        episodes_train: 200,
        episodes_valid: 10,
        validate_every: 50,
        way: 5,
        shot: 5,
        adam: AdamConfig::SOURCE_TRAINING.with_lr(1e-2),
        seed,
        model: BclConfig::small(d, 16, 16),
        loss: LossConfig::default(),
        selection: Selection::ValidationLoss,
    };
    Ok(Benchmark {
        labels,
        train,
        test,
        source,
        plan,
    })
}

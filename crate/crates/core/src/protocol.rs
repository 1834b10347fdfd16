//! Episodic source training, support-set fine-tuning and similarity-based
//! inference over query spans.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::corpus::{enumerate_spans, sample_episode, Episode, LabelSet, Sentence, NON_ENTITY};
use crate::embedkit::{EmbeddedSentence, EmbeddingSource};
use crate::error::{Error, Result};
use crate::model::{
    bind_frozen, bind_params, collect_reps, forward_sentence, model_forward, BclConfig, BclParams, Mode, ParamVars,
    SpanRep,
};
use crate::objective::{build_pairs, circle_loss, LossConfig};

const TRAIN_STREAM: u64 = 1;
const VALID_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

/// The `index`-th seed of an independent stream derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * u128::from(index));
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ValidationLoss,
    LastEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub episodes_train: usize,
    pub episodes_valid: usize,
    /// Validation runs at every multiple of this and after the last episode.
    pub validate_every: usize,
    pub way: usize,
    pub shot: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: BclConfig,
    pub loss: LossConfig,
    pub selection: Selection,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            episodes_train: 10_000,
            episodes_valid: 500,
            validate_every: 1000,
            way: 5,
            shot: 5,
            adam: AdamConfig::SOURCE_TRAINING,
            seed: 0,
            model: BclConfig::default(),
            loss: LossConfig::default(),
            selection: Selection::ValidationLoss,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.episodes_train == 0 || self.episodes_valid == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "episode counts and validate_every must be positive".into(),
            ));
        }
        if self.way == 0 || self.shot == 0 {
            return Err(Error::Config("way and shot must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub seed: u64,
    pub loss: f64,
    pub anchors: usize,
    pub skipped_anchors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BclParams,
    pub log: Vec<EpisodeLog>,
    /// Episode whose parameters were kept.
    pub best_episode: usize,
    pub best_validation_loss: Option<f64>,
}

struct BatchLoss {
    loss: Var,
    anchors: usize,
    skipped: usize,
}

/// Forward every sentence into one graph and take the circle loss over all
/// of their spans together.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    g: &mut Graph,
    pv: &ParamVars,
    sentences: &[&Sentence],
    source: &EmbeddingSource,
    model: &BclConfig,
    loss: &LossConfig,
    mode: Mode,
    pair_seed: u64,
) -> Result<Option<BatchLoss>> {
    let mut reps = Vec::with_capacity(sentences.len());
    let mut labels = Vec::new();
    for s in sentences {
        let embeds = source.lookup(s)?;
        let out = forward_sentence(g, pv, s, &embeds, model, mode)?;
        labels.extend(out.spans.iter().map(|&sp| s.label_of(sp).unwrap_or(NON_ENTITY)));
        reps.push(out.reps);
    }
    if reps.is_empty() {
        return Ok(None);
    }
    let all = g.concat(&reps, 0)?;
    let pairs = build_pairs(&labels, loss, pair_seed);
    Ok(circle_loss(g, all, &pairs, loss)?.map(|l| BatchLoss {
        loss: l,
        anchors: pairs.sets.len(),
        skipped: pairs.skipped_anchors,
    }))
}

struct StepReport {
    loss: f64,
    anchors: usize,
    skipped: usize,
}

/// One optimizer step on the circle loss of `sentences`. Returns `None`
/// without touching anything when the batch has no pairs.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut BclParams,
    adam: &mut Adam,
    sentences: &[&Sentence],
    source: &EmbeddingSource,
    model: &BclConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Option<StepReport>> {
    let mut g = Graph::new();
    let pv = bind_params(&mut g, params);
    let Some(batch) = batch_loss(&mut g, &pv, sentences, source, model, loss, Mode::Train { seed }, seed)? else {
        return Ok(None);
    };
    let value = g.value(batch.loss).item();
    let report = StepReport {
        loss: value,
        anchors: batch.anchors,
        skipped: batch.skipped,
    };
    if !value.is_finite() {
        return Ok(Some(report));
    }
    g.backward(batch.loss)?;
    let grads: Vec<Tensor> = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    adam.step(params.tensors_mut(), &grads)?;
    params.round_to_f32();
    Ok(Some(report))
}

fn episode_sentences(e: &Episode) -> Vec<&Sentence> {
    e.support.iter().chain(&e.query).collect()
}

/// Mean evaluation-mode loss over fixed episodes; episodes without pairs
/// are left out of the mean.
pub fn validation_loss(
    params: &BclParams,
    episodes: &[Episode],
    source: &EmbeddingSource,
    model: &BclConfig,
    loss: &LossConfig,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, e) in episodes.iter().enumerate() {
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, params);
        let sentences = episode_sentences(e);
        if let Some(b) = batch_loss(&mut g, &pv, &sentences, source, model, loss, Mode::Eval, k as u64)? {
            total += g.value(b.loss).item();
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Episodic training from `init`. Validation episodes come from
/// `validation` when given, otherwise from `pool`; they are drawn once and
/// reused at every checkpoint.
pub fn train_source(
    init: &BclParams,
    pool: &[Sentence],
    validation: Option<&[Sentence]>,
    plan: &TrainPlan,
    source: &EmbeddingSource,
) -> Result<TrainOutcome> {
    plan.validate()?;
    init.check_shapes(&plan.model)?;
    let valid_pool = validation.unwrap_or(pool);
    let valid_episodes = (0..plan.episodes_valid)
        .map(|k| {
            sample_episode(
                valid_pool,
                plan.way,
                plan.shot,
                derive_seed(plan.seed, VALID_STREAM, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = init.clone();
    let mut adam = Adam::new(plan.adam);
    let mut log = Vec::with_capacity(plan.episodes_train);
    let mut best = (0usize, None::<f64>, init.clone());
    for k in 0..plan.episodes_train {
        let episode = k + 1;
        let seed = derive_seed(plan.seed, TRAIN_STREAM, k as u64);
        let e = sample_episode(pool, plan.way, plan.shot, seed)?;
        let step = train_step(
            &mut params,
            &mut adam,
            &episode_sentences(&e),
            source,
            &plan.model,
            &plan.loss,
            seed,
        )?;
        let (loss, anchors, skipped) = step.map_or((0.0, 0, 0), |s| (s.loss, s.anchors, s.skipped));
        if !loss.is_finite() {
            return Err(Error::Diverged { episode, seed });
        }
        debug!("episode {episode}: loss {loss:.6} over {anchors} anchors ({skipped} skipped)");
        let mut entry = EpisodeLog {
            episode,
            seed,
            loss,
            anchors,
            skipped_anchors: skipped,
            validation_loss: None,
        };
        if episode % plan.validate_every == 0 || episode == plan.episodes_train {
            let v = validation_loss(&params, &valid_episodes, source, &plan.model, &plan.loss)?;
            info!("episode {episode}: train loss {loss:.6}, validation loss {v:?}");
            entry.validation_loss = v;
            if let Some(v) = v {
                if best.1.is_none_or(|b| v < b) {
                    best = (episode, Some(v), params.clone());
                }
            }
        }
        log.push(entry);
    }
    let outcome = match plan.selection {
        Selection::ValidationLoss if best.1.is_some() => TrainOutcome {
            params: best.2,
            log,
            best_episode: best.0,
            best_validation_loss: best.1,
        },
        _ => TrainOutcome {
            params,
            log,
            best_episode: plan.episodes_train,
            best_validation_loss: best.1,
        },
    };
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetunePlan {
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        FinetunePlan::for_shot(5, 0)
    }
}

impl FinetunePlan {
    /// 50 steps for 1-shot support sets, 100 otherwise.
    pub fn for_shot(shot: usize, seed: u64) -> Self {
        FinetunePlan {
            steps: if shot <= 1 { 50 } else { 100 },
            adam: AdamConfig::FINE_TUNING,
            seed,
            loss: LossConfig::default(),
        }
    }
}

/// Adapts a copy of `params` to a support set; `params` itself is never
/// modified.
pub fn finetune_support(
    params: &BclParams,
    support: &[Sentence],
    plan: &FinetunePlan,
    source: &EmbeddingSource,
    model: &BclConfig,
) -> Result<BclParams> {
    if !support.iter().any(|s| !s.annotations.is_empty()) {
        return Err(Error::Contract("support set has no entity spans".into()));
    }
    params.check_shapes(model)?;
    let mut tuned = params.clone();
    let mut adam = Adam::new(plan.adam);
    let sentences: Vec<&Sentence> = support.iter().collect();
    for k in 0..plan.steps {
        let seed = derive_seed(plan.seed, FINETUNE_STREAM, k as u64);
        match train_step(&mut tuned, &mut adam, &sentences, source, model, &plan.loss, seed)? {
            None => break,
            Some(s) if !s.loss.is_finite() => return Err(Error::Diverged { episode: k + 1, seed }),
            Some(s) => debug!("fine-tune step {}: loss {:.6}", k + 1, s.loss),
        }
    }
    Ok(tuned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Nearest support span under the trained encoder.
    #[default]
    Nn,
    /// Nearest class mean under the trained encoder.
    Proto,
    /// Nearest support span over max-pooled raw embeddings.
    NnShot,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Method::Nn),
            "proto" | "protonet" => Ok(Method::Proto),
            "nnshot" => Ok(Method::NnShot),
            other => Err(Error::Config(format!("unknown method `{other}` (nn, proto, nnshot)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Most non-entity support spans kept in a nearest-neighbour index.
    pub o_span_cap: usize,
    /// Spans whose best cosine falls below this are left unlabeled.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            o_span_cap: 256,
            threshold: None,
            seed: 0,
        }
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Labeled reference vectors searched by cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportIndex {
    labels: Vec<String>,
    units: Vec<Vec<f64>>,
}

impl SupportIndex {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("support index is empty".into()));
        }
        let (labels, vectors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Ok(SupportIndex {
            labels,
            units: vectors.iter().map(|v| unit(v)).collect(),
        })
    }

    /// Every entity span plus up to `o_span_cap` non-entity spans, drawn
    /// without replacement and kept in their original order.
    pub fn nearest_neighbour(reps: &[SpanRep], config: &InferenceConfig) -> Result<Self> {
        let o_idx: Vec<usize> = (0..reps.len()).filter(|&i| !reps[i].is_entity()).collect();
        let mut keep = vec![true; reps.len()];
        if o_idx.len() > config.o_span_cap {
            o_idx.iter().for_each(|&i| keep[i] = false);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            for k in sample(&mut rng, o_idx.len(), config.o_span_cap) {
                keep[o_idx[k]] = true;
            }
        }
        SupportIndex::new(
            reps.iter()
                .zip(keep)
                .filter(|(_, k)| *k)
                .map(|(r, _)| (r.label.clone(), r.vector.clone()))
                .collect(),
        )
    }

    /// One mean vector per label of `labels` (in label order), followed by
    /// the non-entity mean when the support has non-entity spans.
    pub fn prototypes(reps: &[SpanRep], labels: &LabelSet) -> Result<Self> {
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for r in reps {
            let e = sums
                .entry(r.label.as_str())
                .or_insert_with(|| (vec![0.0; r.vector.len()], 0));
            e.0.iter_mut().zip(&r.vector).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let mean = |(s, c): &(Vec<f64>, usize)| s.iter().map(|x| x / *c as f64).collect::<Vec<_>>();
        let mut entries = Vec::new();
        for l in labels.iter() {
            let Some(acc) = sums.get(l) else {
                return Err(Error::Contract(format!("label `{l}` has no support spans")));
            };
            entries.push((l.to_string(), mean(acc)));
        }
        if let Some(acc) = sums.get(NON_ENTITY) {
            entries.push((NON_ENTITY.to_string(), mean(acc)));
        }
        SupportIndex::new(entries)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// Index and cosine of the most similar entry; the lowest index wins
    /// ties.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let q = unit(v);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, u) in self.units.iter().enumerate() {
            let c: f64 = u.iter().zip(&q).map(|(a, b)| a * b).sum();
            if c > best.1 {
                best = (i, c);
            }
        }
        best
    }

    /// Entity predictions for `reps`; non-entity decisions and spans below
    /// the threshold are dropped.
    pub fn predict(&self, reps: &[SpanRep], threshold: Option<f64>) -> Vec<Prediction> {
        reps.iter()
            .filter_map(|r| {
                let (i, score) = self.nearest(&r.vector);
                let label = self.label(i);
                if label == NON_ENTITY || threshold.is_some_and(|t| score < t) {
                    return None;
                }
                Some(Prediction {
                    sentence_id: r.sentence_id.clone(),
                    start: r.start,
                    end: r.end,
                    label: label.to_string(),
                    score,
                })
            })
            .collect()
    }
}

/// Span vectors made by max-pooling the raw token embeddings.
pub fn raw_span_reps(sentence: &Sentence, embeds: &EmbeddedSentence, max_len: usize) -> Result<Vec<SpanRep>> {
    if embeds.n != sentence.len() {
        return Err(Error::Validation(format!(
            "sentence `{}` has {} tokens but {} embedding rows",
            sentence.id,
            sentence.len(),
            embeds.n
        )));
    }
    let spans = enumerate_spans(sentence, max_len);
    let mut data = Vec::with_capacity(spans.len() * embeds.d);
    for s in &spans {
        let mut acc = vec![f64::NEG_INFINITY; embeds.d];
        for i in s.start - 1..s.end {
            acc.iter_mut()
                .zip(embeds.row(i))
                .for_each(|(a, &b)| *a = a.max(f64::from(b)));
        }
        data.extend(acc);
    }
    let values = Tensor::matrix(spans.len(), embeds.d, data)?;
    Ok(collect_reps(sentence, &spans, &values))
}

/// Evaluation-mode span representations for a batch of sentences.
pub fn encode_sentences(
    method: Method,
    params: &BclParams,
    sentences: &[Sentence],
    source: &EmbeddingSource,
    model: &BclConfig,
) -> Result<Vec<SpanRep>> {
    let mut out = Vec::new();
    for s in sentences {
        out.extend(encode(method, params, s, source, model)?);
    }
    Ok(out)
}

fn encode(
    method: Method,
    params: &BclParams,
    sentence: &Sentence,
    source: &EmbeddingSource,
    model: &BclConfig,
) -> Result<Vec<SpanRep>> {
    let embeds = source.lookup(sentence)?;
    match method {
        Method::NnShot => raw_span_reps(sentence, &embeds, model.max_len),
        Method::Nn | Method::Proto => model_forward(params, sentence, &embeds, model, Mode::Eval),
    }
}

/// A support set encoded once and reused across query sentences.
#[derive(Debug, Clone)]
pub struct Predictor {
    method: Method,
    params: BclParams,
    model: BclConfig,
    threshold: Option<f64>,
    index: SupportIndex,
}

impl Predictor {
    pub fn fit(
        method: Method,
        params: &BclParams,
        support: &[Sentence],
        source: &EmbeddingSource,
        model: &BclConfig,
        config: &InferenceConfig,
    ) -> Result<Self> {
        params.check_shapes(model)?;
        let reps = encode_sentences(method, params, support, source, model)?;
        let index = match method {
            Method::Proto => SupportIndex::prototypes(&reps, &LabelSet::from_sentences(support))?,
            Method::Nn | Method::NnShot => SupportIndex::nearest_neighbour(&reps, config)?,
        };
        Ok(Predictor {
            method,
            params: params.clone(),
            model: *model,
            threshold: config.threshold,
            index,
        })
    }

    pub fn index(&self) -> &SupportIndex {
        &self.index
    }

    pub fn predict(&self, query: &Sentence, source: &EmbeddingSource) -> Result<Vec<Prediction>> {
        let reps = encode(self.method, &self.params, query, source, &self.model)?;
        Ok(self.index.predict(&reps, self.threshold))
    }

    /// Predictions for every query sentence, in query order whatever the
    /// worker count.
    pub fn predict_all(
        &self,
        queries: &[Sentence],
        source: &EmbeddingSource,
        workers: usize,
    ) -> Result<Vec<Prediction>> {
        let run = || {
            queries
                .par_iter()
                .map(|q| self.predict(q, source))
                .collect::<Result<Vec<_>>>()
        };
        let nested = if workers <= 1 {
            queries
                .iter()
                .map(|q| self.predict(q, source))
                .collect::<Result<Vec<_>>>()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(run)?
        };
        Ok(nested.into_iter().flatten().collect())
    }
}

pub fn nn_predict(
    params: &BclParams,
    support: &[Sentence],
    query: &Sentence,
    source: &EmbeddingSource,
    model: &BclConfig,
    config: &InferenceConfig,
) -> Result<Vec<Prediction>> {
    Predictor::fit(Method::Nn, params, support, source, model, config)?.predict(query, source)
}

pub fn prototype_predict(
    params: &BclParams,
    support: &[Sentence],
    query: &Sentence,
    source: &EmbeddingSource,
    model: &BclConfig,
    config: &InferenceConfig,
) -> Result<Vec<Prediction>> {
    Predictor::fit(Method::Proto, params, support, source, model, config)?.predict(query, source)
}

pub fn nnshot_predict(
    params: &BclParams,
    support: &[Sentence],
    query: &Sentence,
    source: &EmbeddingSource,
    model: &BclConfig,
    config: &InferenceConfig,
) -> Result<Vec<Prediction>> {
    Predictor::fit(Method::NnShot, params, support, source, model, config)?.predict(query, source)
}

/// Rejects target episodes that reuse source-domain labels.
pub fn check_label_transfer(source_labels: &LabelSet, episode: &Episode) -> Result<()> {
    if let Some(l) = episode.label_set.iter().find(|l| source_labels.contains(l)) {
        return Err(Error::Validation(format!(
            "target label `{l}` also occurs in the source domain"
        )));
    }
    Ok(())
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

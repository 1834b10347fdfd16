//! The span encoder: BiLSTM over token embeddings, a biaffine layer scoring
//! every word pair, row-wise average pooling projected back to the embedding
//! width and added to the input (residual), then max pooling over each span.
//!
//! ```text
//! w (n x d) -> BiLSTM -> H_f, H_b (n x h)
//!   R(i, j) = H_f(i)^T U1 H_b(j) + [H_f(i); H_b(j)]^T U2 + b      (n x n x r)
//!   R <- dropout(layer_norm(R))
//!   v_i = mean_j R(i, j) * P + w_i                                (n x d)
//!   s(p, q) = max(v_p, ..., v_q)                                  (d)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::corpus::{enumerate_spans, Sentence, Span, DEFAULT_MAX_SPAN_LEN, NON_ENTITY};
use crate::embedkit::EmbeddedSentence;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BclConfig {
    /// Token embedding width.
    pub d: usize,
    /// BiLSTM hidden size per direction.
    pub h: usize,
    /// Biaffine output width.
    pub r: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub use_biaffine: bool,
    pub use_residual: bool,
}

impl Default for BclConfig {
    fn default() -> Self {
        BclConfig {
            d: 768,
            h: 512,
            r: 256,
            dropout: 0.2,
            max_len: DEFAULT_MAX_SPAN_LEN,
            use_biaffine: true,
            use_residual: true,
        }
    }
}

impl BclConfig {
    /// Default settings with the given widths.
    pub fn small(d: usize, h: usize, r: usize) -> Self {
        BclConfig {
            d,
            h,
            r,
            ..BclConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.r == 0 || self.max_len == 0 {
            return Err(Error::Config(format!(
                "d, h, r and max_len must be positive (got d={}, h={}, r={}, max_len={})",
                self.d, self.h, self.r, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Every trainable array, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    FwdInput,
    FwdRecurrent,
    FwdBias,
    FwdH0,
    FwdC0,
    BwdInput,
    BwdRecurrent,
    BwdBias,
    BwdH0,
    BwdC0,
    BiaffineBilinear,
    BiaffineLinear,
    BiaffineBias,
    Projection,
}

impl ParamId {
    pub const ALL: [ParamId; 14] = [
        ParamId::FwdInput,
        ParamId::FwdRecurrent,
        ParamId::FwdBias,
        ParamId::FwdH0,
        ParamId::FwdC0,
        ParamId::BwdInput,
        ParamId::BwdRecurrent,
        ParamId::BwdBias,
        ParamId::BwdH0,
        ParamId::BwdC0,
        ParamId::BiaffineBilinear,
        ParamId::BiaffineLinear,
        ParamId::BiaffineBias,
        ParamId::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::FwdInput => "lstm.fwd.w_input",
            ParamId::FwdRecurrent => "lstm.fwd.w_recurrent",
            ParamId::FwdBias => "lstm.fwd.bias",
            ParamId::FwdH0 => "lstm.fwd.h0",
            ParamId::FwdC0 => "lstm.fwd.c0",
            ParamId::BwdInput => "lstm.bwd.w_input",
            ParamId::BwdRecurrent => "lstm.bwd.w_recurrent",
            ParamId::BwdBias => "lstm.bwd.bias",
            ParamId::BwdH0 => "lstm.bwd.h0",
            ParamId::BwdC0 => "lstm.bwd.c0",
            ParamId::BiaffineBilinear => "biaffine.u1",
            ParamId::BiaffineLinear => "biaffine.u2",
            ParamId::BiaffineBias => "biaffine.bias",
            ParamId::Projection => "residual.projection",
        }
    }

    pub fn shape(self, c: &BclConfig) -> Vec<usize> {
        let (d, h, r) = (c.d, c.h, c.r);
        match self {
            ParamId::FwdInput | ParamId::BwdInput => vec![d, 4 * h],
            ParamId::FwdRecurrent | ParamId::BwdRecurrent => vec![h, 4 * h],
            ParamId::FwdBias | ParamId::BwdBias => vec![4 * h],
            ParamId::FwdH0 | ParamId::FwdC0 | ParamId::BwdH0 | ParamId::BwdC0 => vec![h],
            ParamId::BiaffineBilinear => vec![h, r, h],
            ParamId::BiaffineLinear => vec![2 * h, r],
            ParamId::BiaffineBias => vec![r],
            ParamId::Projection => vec![r, d],
        }
    }

    fn fan_in(self, c: &BclConfig) -> usize {
        match self {
            ParamId::FwdInput | ParamId::BwdInput => c.d,
            ParamId::BiaffineLinear | ParamId::BiaffineBias => 2 * c.h,
            ParamId::Projection => c.r,
            _ => c.h,
        }
    }

    fn index(self) -> usize {
        ParamId::ALL.iter().position(|&p| p == self).expect("listed")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BclParams {
    tensors: Vec<Tensor>,
}

impl BclParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        ParamId::ALL.iter().copied().zip(&self.tensors)
    }

    pub fn check_shapes(&self, config: &BclConfig) -> Result<()> {
        for (id, t) in self.iter() {
            let want = id.shape(config);
            if t.shape() != want.as_slice() {
                return Err(Error::dim("parameter shape", &want, t.shape()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    pub fn from_tensors(config: &BclConfig, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != ParamId::ALL.len() {
            return Err(Error::dim("parameter count", &[ParamId::ALL.len()], &[tensors.len()]));
        }
        let params = BclParams { tensors };
        params.check_shapes(config)?;
        Ok(params)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every array, including
/// the initial LSTM states. Values are rounded onto the `f32` grid.
pub fn init_params(config: &BclConfig, seed: u64) -> Result<BclParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = ParamId::ALL
        .iter()
        .map(|&id| {
            let shape = id.shape(config);
            let bound = 1.0 / (id.fan_in(config) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| f64::from(rng.gen_range(-bound..bound) as f32)).collect();
            Tensor::new(shape, data).expect("shape matches length")
        })
        .collect();
    Ok(BclParams { tensors })
}

/// Graph handles for one binding of [`BclParams`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Adds every parameter to `g` as a trainable leaf.
pub fn bind_params(g: &mut Graph, params: &BclParams) -> ParamVars {
    ParamVars(params.tensors.iter().map(|t| g.param(t.clone())).collect())
}

/// Adds every parameter to `g` as a constant (inference only).
pub fn bind_frozen(g: &mut Graph, params: &BclParams) -> ParamVars {
    ParamVars(params.tensors.iter().map(|t| g.constant(t.clone())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from this seed (mixed with the sentence id).
    Train {
        seed: u64,
    },
}

struct Direction {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
    h0: ParamId,
    c0: ParamId,
}

const FORWARD: Direction = Direction {
    input: ParamId::FwdInput,
    recurrent: ParamId::FwdRecurrent,
    bias: ParamId::FwdBias,
    h0: ParamId::FwdH0,
    c0: ParamId::FwdC0,
};

const BACKWARD: Direction = Direction {
    input: ParamId::BwdInput,
    recurrent: ParamId::BwdRecurrent,
    bias: ParamId::BwdBias,
    h0: ParamId::BwdH0,
    c0: ParamId::BwdC0,
};

fn lstm_direction(g: &mut Graph, x: Var, pv: &ParamVars, h: usize, dir: &Direction, reverse: bool) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let xw = g.matmul(x, pv.get(dir.input))?;
    let xw = g.add_bias(xw, pv.get(dir.bias))?;
    let mut hidden = g.reshape(pv.get(dir.h0), &[1, h])?;
    let mut cell = g.reshape(pv.get(dir.c0), &[1, h])?;
    let mut outputs = vec![hidden; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let xt = g.rows(xw, &[t])?;
        let hw = g.matmul(hidden, pv.get(dir.recurrent))?;
        let z = g.add(xt, hw)?;
        let zi = g.slice_cols(z, 0, h)?;
        let zf = g.slice_cols(z, h, 2 * h)?;
        let zg = g.slice_cols(z, 2 * h, 3 * h)?;
        let zo = g.slice_cols(z, 3 * h, 4 * h)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let c_hat = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, cell)?;
        let write = g.mul(i, c_hat)?;
        cell = g.add(keep, write)?;
        let tc = g.tanh(cell);
        hidden = g.mul(o, tc)?;
        outputs[t] = hidden;
    }
    g.concat(&outputs, 0)
}

/// Single-layer bidirectional LSTM. Returns `(H_f, H_b)`, both `n x h` and
/// indexed by token position.
pub fn bilstm_forward(g: &mut Graph, embeds: Var, pv: &ParamVars, config: &BclConfig) -> Result<(Var, Var)> {
    let shape = g.value(embeds).shape().to_vec();
    if shape.len() != 2 || shape[1] != config.d || shape[0] == 0 {
        return Err(Error::dim("bilstm input", &[0, config.d], &shape));
    }
    let hf = lstm_direction(g, embeds, pv, config.h, &FORWARD, false)?;
    let hb = lstm_direction(g, embeds, pv, config.h, &BACKWARD, true)?;
    Ok((hf, hb))
}

/// Biaffine pair scores before normalization, `n x n x r`.
pub fn biaffine_raw(g: &mut Graph, hf: Var, hb: Var, pv: &ParamVars, config: &BclConfig) -> Result<Var> {
    let h = config.h;
    let bil = g.bilinear(hf, pv.get(ParamId::BiaffineBilinear), hb)?;
    let top: Vec<usize> = (0..h).collect();
    let bottom: Vec<usize> = (h..2 * h).collect();
    let u2_f = g.rows(pv.get(ParamId::BiaffineLinear), &top)?;
    let u2_b = g.rows(pv.get(ParamId::BiaffineLinear), &bottom)?;
    let left = g.matmul(hf, u2_f)?;
    let right = g.matmul(hb, u2_b)?;
    let linear = g.pair_sum(left, right)?;
    let scores = g.add(bil, linear)?;
    g.add_bias(scores, pv.get(ParamId::BiaffineBias))
}

fn mix_seed(seed: u64, id: &str) -> u64 {
    id.bytes().fold(seed ^ 0x51_7C_C1_B7_27_22_0A_95, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Biaffine scores followed by layer normalization over the `r` features of
/// each pair and, in training mode, dropout.
pub fn biaffine_scores(
    g: &mut Graph,
    hf: Var,
    hb: Var,
    pv: &ParamVars,
    config: &BclConfig,
    mode: Mode,
    sentence_id: &str,
) -> Result<Var> {
    if !config.use_biaffine {
        return Err(Error::Contract("biaffine layer disabled in config".into()));
    }
    let raw = biaffine_raw(g, hf, hb, pv, config)?;
    let normed = g.layer_norm(raw, LAYER_NORM_EPS)?;
    match mode {
        Mode::Train { seed } if config.dropout > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, sentence_id));
            let keep = 1.0 / (1.0 - config.dropout);
            let mask = (0..g.value(normed).len())
                .map(|_| if rng.gen::<f64>() < config.dropout { 0.0 } else { keep })
                .collect();
            g.dropout(normed, mask)
        }
        _ => Ok(normed),
    }
}

/// Word representations `v_i`. `scores` is `None` exactly when the biaffine
/// layer is disabled, in which case `v_i = w_i`.
pub fn word_dependency_rep(
    g: &mut Graph,
    scores: Option<Var>,
    embeds: Var,
    pv: &ParamVars,
    config: &BclConfig,
) -> Result<Var> {
    let Some(scores) = scores else {
        return Ok(embeds);
    };
    let pooled = g.mean_axis(scores, 1)?;
    let projected = g.matmul(pooled, pv.get(ParamId::Projection))?;
    if config.use_residual {
        g.add(projected, embeds)
    } else {
        Ok(projected)
    }
}

/// Max pooling of word representations over each span, one row per span.
pub fn span_representation(g: &mut Graph, words: Var, spans: &[Span]) -> Result<Var> {
    let n = g.value(words).shape()[0];
    let mut ranges = Vec::with_capacity(spans.len());
    for s in spans {
        if s.start < 1 || s.start > s.end || s.end > n {
            return Err(Error::Validation(format!(
                "span ({}, {}) outside 1..={n}",
                s.start, s.end
            )));
        }
        ranges.push((s.start - 1, s.end - 1));
    }
    g.span_max(words, &ranges)
}

fn embeds_var(g: &mut Graph, embeds: &EmbeddedSentence, config: &BclConfig) -> Result<Var> {
    if embeds.d != config.d {
        return Err(Error::dim("embedding width", &[config.d], &[embeds.d]));
    }
    let t = Tensor::matrix(embeds.n, embeds.d, embeds.to_f64())?;
    Ok(g.constant(t))
}

/// Graph nodes produced for one sentence.
#[derive(Debug, Clone)]
pub struct SentenceGraph {
    pub spans: Vec<Span>,
    /// `v`, `n x d`.
    pub words: Var,
    /// Span vectors, `spans.len() x d`.
    pub reps: Var,
}

pub fn forward_sentence(
    g: &mut Graph,
    pv: &ParamVars,
    sentence: &Sentence,
    embeds: &EmbeddedSentence,
    config: &BclConfig,
    mode: Mode,
) -> Result<SentenceGraph> {
    if embeds.n != sentence.len() {
        return Err(Error::Validation(format!(
            "sentence `{}` has {} tokens but {} embedding rows",
            sentence.id,
            sentence.len(),
            embeds.n
        )));
    }
    let w = embeds_var(g, embeds, config)?;
    let scores = if config.use_biaffine {
        let (hf, hb) = bilstm_forward(g, w, pv, config)?;
        Some(biaffine_scores(g, hf, hb, pv, config, mode, &sentence.id)?)
    } else {
        None
    };
    let words = word_dependency_rep(g, scores, w, pv, config)?;
    let spans = enumerate_spans(sentence, config.max_len);
    let reps = span_representation(g, words, &spans)?;
    Ok(SentenceGraph { spans, words, reps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRep {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    pub vector: Vec<f64>,
    /// Gold label, or [`NON_ENTITY`].
    pub label: String,
}

impl SpanRep {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn is_entity(&self) -> bool {
        self.label != NON_ENTITY
    }
}

pub(crate) fn collect_reps(sentence: &Sentence, spans: &[Span], values: &Tensor) -> Vec<SpanRep> {
    spans
        .iter()
        .enumerate()
        .map(|(k, s)| SpanRep {
            sentence_id: sentence.id.clone(),
            start: s.start,
            end: s.end,
            vector: values.row(k).to_vec(),
            label: sentence.label_of(*s).unwrap_or(NON_ENTITY).to_string(),
        })
        .collect()
}

/// Span representations for every enumerated span of `sentence`, labeled
/// from its annotations.
pub fn model_forward(
    params: &BclParams,
    sentence: &Sentence,
    embeds: &EmbeddedSentence,
    config: &BclConfig,
    mode: Mode,
) -> Result<Vec<SpanRep>> {
    let mut g = Graph::new();
    let pv = bind_frozen(&mut g, params);
    let out = forward_sentence(&mut g, &pv, sentence, embeds, config, mode)?;
    Ok(collect_reps(sentence, &out.spans, g.value(out.reps)))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: BclConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes a one-line JSON manifest, a newline, then every tensor as
/// little-endian binary32 in manifest order. Offsets are relative to the
/// first byte after the newline.
pub fn save_checkpoint(params: &BclParams, config: &BclConfig, path: &Path) -> Result<()> {
    params.check_shapes(config)?;
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (id, t) in params.iter() {
        tensors.push(TensorEntry {
            name: id.name().to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: *config,
        tensors,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for t in params.tensors() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BclParams, BclConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    r.read_until(b'\n', &mut header)?;
    let manifest: Manifest =
        serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let config = manifest.config;
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.tensors.len() != ParamId::ALL.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            ParamId::ALL.len(),
            manifest.tensors.len()
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut tensors = Vec::with_capacity(ParamId::ALL.len());
    let mut expected_offset = 0u64;
    for (id, entry) in ParamId::ALL.iter().zip(&manifest.tensors) {
        let want = id.shape(&config);
        if entry.name != id.name() || entry.shape != want {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                entry.name,
                entry.shape,
                id.name(),
                want
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let count: usize = want.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("blob truncated inside `{}`", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.push(Tensor::new(want, data)?);
        expected_offset = end as u64;
    }
    if blob.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            blob.len() as u64 - expected_offset
        )));
    }
    Ok((BclParams::from_tensors(&config, tensors)?, config))
}

//! End-to-end gradient check: circle loss over the span representations of
//! one short sentence, differentiated by the tape and by central
//! differences with respect to every parameter array.

use serde::Serialize;

use crate::autograd::{finite_diff_grad, max_relative_error, norm_relative_error, Graph, Tensor};
use crate::corpus::{Sentence, SpanAnnotation, NON_ENTITY};
use crate::embedkit::{EmbeddedSentence, SyntheticEmbeddings};
use crate::error::{Error, Result};
use crate::model::{bind_params, forward_sentence, init_params, BclConfig, BclParams, Mode, ParamId};
use crate::objective::{build_pairs, circle_loss, LossConfig};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for per-element relative errors.
pub const ELEMENT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: &'static str,
    pub elements: usize,
    pub max_relative: f64,
    pub norm_relative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub loss: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative).fold(0.0, f64::max)
    }
}

/// The standard check: a 3-token sentence with two same-label entities,
/// `d = 8`, `h = r = 4`, `tau = 10`, `lambda = 30` and one negative per
/// anchor. Dropout stays on with a fixed mask.
pub fn grad_check(seed: u64) -> Result<GradCheckReport> {
    let sentence = Sentence::new(
        "grad-check",
        vec!["a".into(), "b".into(), "c".into()],
        vec![SpanAnnotation::new(1, 1, "A"), SpanAnnotation::new(3, 3, "A")],
    )?;
    let model = BclConfig::small(8, 4, 4);
    let embeds = SyntheticEmbeddings::new(seed, model.d, None)?.embed(&sentence);
    let loss = LossConfig {
        max_negatives_per_anchor: 1,
        ..LossConfig::default()
    };
    let params = init_params(&model, seed)?;
    grad_check_with(&params, &sentence, &embeds, &model, &loss, seed)
}

pub fn grad_check_with(
    params: &BclParams,
    sentence: &Sentence,
    embeds: &EmbeddedSentence,
    model: &BclConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let mode = Mode::Train { seed };
    let eval = |p: &BclParams, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pv = bind_params(&mut g, p);
        let out = forward_sentence(&mut g, &pv, sentence, embeds, model, mode)?;
        let labels: Vec<&str> = out
            .spans
            .iter()
            .map(|&s| sentence.label_of(s).unwrap_or(NON_ENTITY))
            .collect();
        let pairs = build_pairs(&labels, loss, seed);
        let l = circle_loss(&mut g, out.reps, &pairs, loss)?
            .ok_or_else(|| Error::Contract("grad-check sentence yields no pairs".into()))?;
        let value = g.value(l).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(l)?;
        let gs = pv
            .vars()
            .iter()
            .zip(p.tensors())
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };
    let (value, analytic) = eval(params, true)?;
    let mut groups = Vec::with_capacity(ParamId::ALL.len());
    for (k, id) in ParamId::ALL.iter().enumerate() {
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |t| {
                *probe.get_mut(*id) = t.clone();
                eval(&probe, false).map(|r| r.0).unwrap_or(f64::NAN)
            },
            params.get(*id),
            FD_STEP,
        );
        groups.push(GroupError {
            name: id.name(),
            elements: numeric.len(),
            max_relative: max_relative_error(&analytic[k], &numeric, ELEMENT_FLOOR),
            norm_relative: norm_relative_error(&analytic[k], &numeric),
        });
    }
    Ok(GradCheckReport {
        seed,
        loss: value,
        groups,
    })
}

//! Evaluation metrics: frame error rate, edit distance, next-step error and
//! decoding error.

use serde::{Deserialize, Serialize};

use crate::decoder::{beam_search, BeamConfig, DecodeRecord};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::model::{InputMode, SeqInput, SeqModel, EOS};
use crate::tasks::Dataset;

/// Fraction of positions where `pred` and `truth` differ.
pub fn frame_error_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub(crate) fn check_compatible(model: &SeqModel, ds: &Dataset) -> Result<()> {
    if model.mode() != ds.mode {
        return Err(Error::ModeMismatch(format!(
            "model is {} but dataset is {}",
            model.mode().as_str(),
            ds.mode.as_str()
        )));
    }
    if model.config.vocab_size != ds.vocab_size || model.config.input_dim != ds.input_dim {
        return Err(Error::config(format!(
            "model vocab/input ({}, {}) differ from dataset ({}, {})",
            model.config.vocab_size, model.config.input_dim, ds.vocab_size, ds.input_dim
        )));
    }
    Ok(())
}

/// Error rate of argmax predictions when the ground truth is fed at every
/// step, over all steps of all sequences.
pub fn next_step_error(model: &SeqModel, ds: &Dataset) -> Result<f64> {
    check_compatible(model, ds)?;
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let mut wrong = 0usize;
    let mut total = 0usize;
    for ex in &ds.examples {
        let fed = model.teacher_forced_tokens(&ex.targets);
        let (_, trace) = model.forward(&ex.input, &ex.targets, &fed)?;
        for s in &trace.steps {
            wrong += usize::from(argmax(&s.logits) != s.target);
            total += 1;
        }
    }
    Ok(wrong as f64 / total as f64)
}

fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}

/// Per-example decoding error of the top beam hypothesis, together with the
/// decoded hypotheses.
///
/// Aligned mode scores frame error rate, decoding every frame regardless of
/// `beam.max_len`. Static mode scores edit distance normalized by the
/// length of the target without EOS.
pub fn decode_dataset(
    model: &SeqModel,
    ds: &Dataset,
    beam: &BeamConfig,
) -> Result<(Vec<DecodeRecord>, Vec<f64>, Vec<usize>)> {
    check_compatible(model, ds)?;
    let mut records = Vec::with_capacity(ds.len());
    let mut errors = Vec::with_capacity(ds.len());
    let mut distances = Vec::with_capacity(ds.len());
    for ex in &ds.examples {
        let cfg = match &ex.input {
            SeqInput::Frames(f) => BeamConfig {
                max_len: f.len(),
                ..beam.clone()
            },
            SeqInput::Static(_) => beam.clone(),
        };
        let hyps = beam_search(model, &ex.input, &cfg)?;
        let top = &hyps[0].tokens;
        match ds.mode {
            InputMode::Aligned => {
                errors.push(frame_error_rate(top, &ex.targets)?);
                distances.push(edit_distance(top, &ex.targets));
            }
            InputMode::Static => {
                let truth = strip_eos(&ex.targets);
                let d = edit_distance(strip_eos(top), truth);
                distances.push(d);
                errors.push(d as f64 / truth.len().max(1) as f64);
            }
        }
        records.push(DecodeRecord {
            id: ex.id.clone(),
            hypotheses: hyps,
        });
    }
    Ok((records, errors, distances))
}

/// Mean decoding error over the dataset (see [`decode_dataset`]).
pub fn decoding_error(model: &SeqModel, ds: &Dataset, beam: &BeamConfig) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let (_, errors, _) = decode_dataset(model, ds, beam)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Evaluation summary written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub next_step_fer: f64,
    pub decoding_fer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_edit_distance: Option<f64>,
    /// Fraction of examples decoded exactly.
    pub exact_match: f64,
    pub num_examples: usize,
}

pub fn evaluate(
    model: &SeqModel,
    ds: &Dataset,
    beam: &BeamConfig,
) -> Result<(EvalMetrics, Vec<DecodeRecord>)> {
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let next = next_step_error(model, ds)?;
    let (records, errors, distances) = decode_dataset(model, ds, beam)?;
    let n = ds.len() as f64;
    let exact = distances.iter().filter(|&&d| d == 0).count() as f64 / n;
    let mean_dist =
        (ds.mode == InputMode::Static).then(|| distances.iter().sum::<usize>() as f64 / n);
    Ok((
        EvalMetrics {
            next_step_fer: next,
            decoding_fer: errors.iter().sum::<f64>() / n,
            mean_edit_distance: mean_dist,
            exact_match: exact,
            num_examples: ds.len(),
        },
        records,
    ))
}

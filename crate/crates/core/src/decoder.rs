//! Inference: greedy, ancestral sampling, beam search, and an exhaustive
//! search used as a test oracle for the beam.
//!
//! In static mode generation stops at EOS or `max_len`. In aligned mode the
//! output has exactly one label per frame (capped by `max_len`) and EOS is an
//! ordinary token.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, log_softmax, sample_categorical, softmax, RngState};
use crate::model::{CellState, InputMode, SeqInput, SeqModel, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub num_results: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 10,
            num_results: 1,
            max_len: 100,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_results == 0 || self.num_results > self.beam_width || self.max_len == 0 {
            return Err(Error::config(format!(
                "beam config needs 1 <= num_results <= beam_width and max_len >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A scored output sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

/// Partial sequence kept on the beam.
#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: CellState,
    /// Log-probabilities of the next token; empty once finished.
    pub next_log_probs: Vec<f64>,
    /// Last token is EOS (static mode only).
    pub finished: bool,
}

/// Best-first ordering: higher log-probability, then lexicographically
/// smaller tokens.
fn rank(a_lp: f64, a_tok: &[usize], b_lp: f64, b_tok: &[usize]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tok.cmp(b_tok))
}

fn output_len(input: &SeqInput, max_len: usize) -> usize {
    match input {
        SeqInput::Frames(f) => max_len.min(f.len()),
        SeqInput::Static(_) => max_len,
    }
}

fn frame_at(input: &SeqInput, t: usize) -> Option<&[f64]> {
    match input {
        SeqInput::Frames(f) => Some(f[t].as_slice()),
        SeqInput::Static(_) => None,
    }
}

fn ends_sequence(model: &SeqModel, token: usize) -> bool {
    model.mode() == InputMode::Static && token == EOS
}

/// Generation loop shared by greedy and sampled decoding.
fn decode_with<F>(
    model: &SeqModel,
    input: &SeqInput,
    max_len: usize,
    mut pick: F,
) -> Result<Vec<usize>>
where
    F: FnMut(&[f64]) -> Result<usize>,
{
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let len = output_len(input, max_len);
    let (mut state, mut logits) = model.initial_state(input)?;
    let mut out = Vec::with_capacity(len);
    loop {
        let tok = pick(&logits)?;
        out.push(tok);
        if ends_sequence(model, tok) || out.len() == len {
            return Ok(out);
        }
        let (s, l) = model.step(&state, tok, frame_at(input, out.len()))?;
        state = s;
        logits = l;
    }
}

/// Feeds back the most likely token at every step.
pub fn greedy_decode(model: &SeqModel, input: &SeqInput, max_len: usize) -> Result<Vec<usize>> {
    decode_with(model, input, max_len, |l| Ok(argmax(l)))
}

/// Feeds back a token drawn from the model's distribution at every step.
pub fn sample_decode(
    model: &SeqModel,
    input: &SeqInput,
    max_len: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    decode_with(model, input, max_len, |l| {
        sample_categorical(&softmax(l), rng)
    })
}

/// Beam search keeping the `beam_width` best candidates.
///
/// Each round extends every unfinished candidate by every vocabulary token,
/// pools the extensions with the finished candidates, and keeps the best
/// `beam_width` by raw log-probability (ties to the lexicographically
/// smaller sequence). The search stops when every kept candidate is
/// finished, when no extension survives pruning, or at the length limit.
/// Returns the best `num_results`, best first.
pub fn beam_search(
    model: &SeqModel,
    input: &SeqInput,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let len = output_len(input, cfg.max_len);
    let (state, logits) = model.initial_state(input)?;
    let mut beam = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next_log_probs: log_softmax(&logits),
        finished: false,
    }];
    let vocab = model.vocab_size();

    // token None marks a carried-over finished hypothesis
    struct Cand {
        parent: usize,
        token: Option<usize>,
        logprob: f64,
        tokens: Vec<usize>,
    }

    loop {
        let mut cands: Vec<Cand> = Vec::with_capacity(beam.len() * vocab);
        for (pi, hyp) in beam.iter().enumerate() {
            if hyp.finished {
                cands.push(Cand {
                    parent: pi,
                    token: None,
                    logprob: hyp.logprob,
                    tokens: hyp.tokens.clone(),
                });
                continue;
            }
            for (v, lp) in hyp.next_log_probs.iter().enumerate() {
                let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
                tokens.extend_from_slice(&hyp.tokens);
                tokens.push(v);
                cands.push(Cand {
                    parent: pi,
                    token: Some(v),
                    logprob: hyp.logprob + lp,
                    tokens,
                });
            }
        }
        cands.sort_by(|a, b| rank(a.logprob, &a.tokens, b.logprob, &b.tokens));
        cands.truncate(cfg.beam_width);

        let added = cands.iter().any(|c| c.token.is_some());
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            match c.token {
                None => next.push(beam[c.parent].clone()),
                Some(tok) => {
                    let finished = ends_sequence(model, tok);
                    let (state, next_log_probs) = if finished || c.tokens.len() == len {
                        (beam[c.parent].state.clone(), Vec::new())
                    } else {
                        let (s, l) = model.step(
                            &beam[c.parent].state,
                            tok,
                            frame_at(input, c.tokens.len()),
                        )?;
                        (s, log_softmax(&l))
                    };
                    next.push(BeamHypothesis {
                        tokens: c.tokens,
                        logprob: c.logprob,
                        state,
                        next_log_probs,
                        finished,
                    });
                }
            }
        }
        beam = next;
        let at_limit = beam.iter().all(|h| h.finished || h.tokens.len() == len);
        if !added || at_limit {
            break;
        }
    }

    Ok(beam
        .into_iter()
        .take(cfg.num_results)
        .map(|h| Hypothesis {
            tokens: h.tokens,
            logprob: h.logprob,
        })
        .collect())
}

/// Upper bound on the number of sequences [`exhaustive_search`] will visit.
pub const EXHAUSTIVE_BUDGET: u128 = 1_000_000;

/// Scores every complete sequence (ended by EOS, or of full length) and
/// returns the best under the same ordering as [`beam_search`].
pub fn exhaustive_search(model: &SeqModel, input: &SeqInput, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let len = output_len(input, max_len);
    let total = (model.vocab_size() as u128)
        .checked_pow(len as u32)
        .unwrap_or(u128::MAX);
    if total > EXHAUSTIVE_BUDGET {
        return Err(Error::BudgetExceeded(total));
    }
    let (state, logits) = model.initial_state(input)?;
    let mut best: Option<Hypothesis> = None;
    let mut prefix = Vec::with_capacity(len);
    dfs(
        model,
        input,
        len,
        &state,
        &log_softmax(&logits),
        0.0,
        &mut prefix,
        &mut best,
    )?;
    Ok(best.expect("at least one sequence"))
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    model: &SeqModel,
    input: &SeqInput,
    len: usize,
    state: &CellState,
    log_probs: &[f64],
    logprob: f64,
    prefix: &mut Vec<usize>,
    best: &mut Option<Hypothesis>,
) -> Result<()> {
    // tokens ascend, so complete sequences arrive in lexicographic order and
    // only a strictly better score may replace the incumbent
    for (v, lp) in log_probs.iter().enumerate() {
        let score = logprob + lp;
        prefix.push(v);
        if ends_sequence(model, v) || prefix.len() == len {
            if best.as_ref().is_none_or(|b| score > b.logprob) {
                *best = Some(Hypothesis {
                    tokens: prefix.clone(),
                    logprob: score,
                });
            }
        } else {
            let (s, l) = model.step(state, v, frame_at(input, prefix.len()))?;
            dfs(model, input, len, &s, &log_softmax(&l), score, prefix, best)?;
        }
        prefix.pop();
    }
    Ok(())
}

/// One line of the decode output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub hypotheses: Vec<Hypothesis>,
}

pub fn write_decodes(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

//! Mini-batch SGD training with pluggable feed policies.
//!
//! A feed policy decides, at every step after the first, whether the model
//! consumes the true previous token or one produced by the model itself.
//! Whatever gets fed is a constant for the gradient: no gradient flows
//! through the coin flips or the sampling distribution.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::error::{Error, Result};
use crate::math::{argmax, derive_rng, sample_categorical, softmax, RngState};
use crate::metrics::{check_compatible, decoding_error, next_step_error};
use crate::model::{FedSource, ForwardTrace, Gradients, SeqModel};
use crate::schedule::DecaySchedule;
use crate::tasks::{Dataset, SeqExample};

/// How a model-generated replacement token is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Most likely token of the previous step's distribution.
    Argmax,
    /// Token drawn from the previous step's distribution.
    Multinomial,
    /// Token drawn uniformly from the whole vocabulary, ignoring the model.
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One coin per token.
    #[default]
    PerToken,
    /// One coin per sequence. Known to train much worse than per-token
    /// flips; provided to reproduce that result.
    PerSequence,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeedPolicy {
    #[default]
    TeacherForcing,
    AlwaysSampling {
        mode: SampleMode,
    },
    ScheduledSampling {
        schedule: DecaySchedule,
        mode: SampleMode,
        #[serde(default)]
        granularity: Granularity,
    },
}

impl FeedPolicy {
    /// Probability of feeding the truth at mini-batch `i`.
    pub fn epsilon(&self, i: u64) -> f64 {
        match self {
            FeedPolicy::TeacherForcing => 1.0,
            FeedPolicy::AlwaysSampling { .. } => 0.0,
            FeedPolicy::ScheduledSampling { schedule, .. } => schedule.epsilon_at(i),
        }
    }

    fn mode(&self) -> SampleMode {
        match self {
            FeedPolicy::TeacherForcing => SampleMode::Argmax,
            FeedPolicy::AlwaysSampling { mode } | FeedPolicy::ScheduledSampling { mode, .. } => {
                *mode
            }
        }
    }

    fn granularity(&self) -> Granularity {
        match self {
            FeedPolicy::ScheduledSampling { granularity, .. } => *granularity,
            _ => Granularity::PerToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FeedPolicy::ScheduledSampling { schedule, .. } = self {
            schedule.clone().validate()?;
        }
        Ok(())
    }
}

fn model_estimate(mode: SampleMode, logits: &[f64], rng: &mut RngState) -> Result<usize> {
    match mode {
        SampleMode::Argmax => Ok(argmax(logits)),
        SampleMode::Multinomial => sample_categorical(&softmax(logits), rng),
        SampleMode::Uniform => Ok(rng.random_range(0..logits.len())),
    }
}

/// Runs the recurrence left to right, choosing the fed token of every step
/// `t ≥ 2` with the policy: the truth `y_{t−1}` with probability `ε_i`,
/// otherwise an estimate from the step-`t−1` distribution. Each choice sees
/// the state produced by what was actually fed before it.
///
/// The returned trace holds the realized fed tokens and is what
/// [`SeqModel::backward`] differentiates.
pub fn choose_fed_tokens(
    model: &SeqModel,
    example: &SeqExample,
    policy: &FeedPolicy,
    i: u64,
    rng: &mut RngState,
) -> Result<ForwardTrace> {
    let eps = policy.epsilon(i);
    let mode = policy.mode();
    let targets = &example.targets;
    let per_sequence = match policy.granularity() {
        Granularity::PerSequence => Some(rng.random::<f64>() < eps),
        Granularity::PerToken => None,
    };
    model.run_with(&example.input, targets, |t, prev_logits| {
        let truth = per_sequence.unwrap_or_else(|| rng.random::<f64>() < eps);
        if truth {
            Ok((targets[t - 1], FedSource::Truth))
        } else {
            Ok((model_estimate(mode, prev_logits, rng)?, FedSource::Sampled))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub seed: u64,
    /// Evaluate on the validation set every this many mini-batches.
    pub eval_every: usize,
    /// Beam used for validation decoding.
    #[serde(default)]
    pub beam: BeamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::config("lr and clip must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "batch_size, epochs and eval_every must be positive",
            ));
        }
        self.beam.validate()
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Index of the last mini-batch before this evaluation.
    pub step: u64,
    /// `ε` used for that mini-batch.
    pub epsilon: f64,
    /// Mean per-token training NLL since the previous record.
    pub train_nll: f64,
    pub valid_next_step_fer: f64,
    pub valid_decoding_fer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Record whose parameters were kept (lowest validation decoding error).
    pub best: Option<usize>,
}

pub const REPORT_HEADER: &str = "step,epsilon,train_nll,valid_next_step_fer,valid_decoding_fer";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.epsilon, r.train_nll, r.valid_next_step_fer, r.valid_decoding_fer
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn best_record(&self) -> Option<&TrainRecord> {
        self.best.map(|b| &self.records[b])
    }
}

// stream tag separating the shuffle RNG from the per-example streams
const SHUFFLE_STREAM: u64 = u64::MAX;

/// Gradient of one mini-batch: per-example traces from the policy, summed
/// in example order. Returns the gradient, total NLL and token count.
pub fn batch_gradient(
    model: &SeqModel,
    data: &Dataset,
    indices: &[usize],
    policy: &FeedPolicy,
    i: u64,
    seed: u64,
    epoch: u64,
) -> Result<(Gradients, f64, usize)> {
    let mut grads = model.params.zeros_like();
    let mut nll = 0.0;
    let mut tokens = 0;
    for &idx in indices {
        let ex = &data.examples[idx];
        let mut rng = derive_rng(seed, &[epoch, idx as u64]);
        let trace = choose_fed_tokens(model, ex, policy, i, &mut rng)?;
        if !trace.nll.is_finite() {
            return Err(Error::Diverged {
                batch: i as usize,
                what: format!("non-finite loss on example {}", ex.id),
            });
        }
        model.backward_into(&ex.input, &trace, &mut grads);
        nll += trace.nll;
        tokens += trace.len();
    }
    Ok((grads, nll, tokens))
}

/// Trains `model` and returns the parameters with the best validation
/// decoding error together with the full report.
pub fn train(
    model: &SeqModel,
    train_set: &Dataset,
    valid_set: &Dataset,
    policy: &FeedPolicy,
    cfg: &TrainConfig,
) -> Result<(SeqModel, TrainReport)> {
    train_with_progress(model, train_set, valid_set, policy, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every evaluation with the new
/// record and the parameters it was measured on.
pub fn train_with_progress<F>(
    model: &SeqModel,
    train_set: &Dataset,
    valid_set: &Dataset,
    policy: &FeedPolicy,
    cfg: &TrainConfig,
    mut on_record: F,
) -> Result<(SeqModel, TrainReport)>
where
    F: FnMut(&TrainRecord, &SeqModel),
{
    cfg.validate()?;
    policy.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::config(
            "training and validation sets must be nonempty",
        ));
    }
    check_compatible(model, train_set)?;
    check_compatible(model, valid_set)?;

    let mut current = model.clone();
    let mut best_model = model.clone();
    let mut best_err = f64::INFINITY;
    let mut report = TrainReport::default();
    let total_batches = cfg.epochs * cfg.batches_per_epoch(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut i: u64 = 0;
    let mut nll_acc = 0.0;
    let mut tok_acc = 0usize;

    for epoch in 0..cfg.epochs as u64 {
        order.sort_unstable();
        order.shuffle(&mut derive_rng(cfg.seed, &[SHUFFLE_STREAM, epoch]));
        for batch in order.chunks(cfg.batch_size) {
            let eps = policy.epsilon(i);
            let (grads, nll, tokens) =
                batch_gradient(&current, train_set, batch, policy, i, cfg.seed, epoch)?;
            current
                .params
                .sgd_update(&grads, cfg.lr, cfg.clip)
                .map_err(|e| match e {
                    Error::NonFiniteGradient => Error::Diverged {
                        batch: i as usize,
                        what: "non-finite gradient".into(),
                    },
                    other => other,
                })?;
            nll_acc += nll;
            tok_acc += tokens;

            let done = (i + 1) as usize;
            if done.is_multiple_of(cfg.eval_every) || done == total_batches {
                let record = TrainRecord {
                    step: i,
                    epsilon: eps,
                    train_nll: nll_acc / tok_acc as f64,
                    valid_next_step_fer: next_step_error(&current, valid_set)?,
                    valid_decoding_fer: decoding_error(&current, valid_set, &cfg.beam)?,
                };
                nll_acc = 0.0;
                tok_acc = 0;
                if record.valid_decoding_fer < best_err {
                    best_err = record.valid_decoding_fer;
                    best_model = current.clone();
                    report.best = Some(report.records.len());
                }
                on_record(&record, &current);
                report.records.push(record);
            }
            i += 1;
        }
    }
    Ok((best_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputMode, ModelConfig};
    use crate::tasks::{CopyTask, Generator, HmmTask, Split};

    fn copy_setup() -> (SeqModel, Dataset, Dataset) {
        let g = Generator::copy(
            CopyTask {
                payload_vocab: 6,
                min_len: 2,
                max_len: 4,
            },
            4,
        )
        .unwrap();
        let tr = g.generate(40, Split::Train);
        let va = g.generate(10, Split::Valid);
        let m = SeqModel::new(ModelConfig {
            vocab_size: tr.vocab_size,
            embed_dim: 6,
            hidden_dim: 10,
            mode: InputMode::Static,
            input_dim: tr.input_dim,
            init_scale: 0.3,
            seed: 2,
        })
        .unwrap();
        (m, tr, va)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 8,
            epochs: 2,
            clip: 5.0,
            seed: 17,
            eval_every: 5,
            beam: BeamConfig {
                beam_width: 2,
                num_results: 1,
                max_len: 8,
            },
        }
    }

    #[test]
    fn teacher_forcing_feeds_truth() {
        let (m, tr, _) = copy_setup();
        let ex = &tr.examples[0];
        let mut rng = derive_rng(0, &[]);
        let trace = choose_fed_tokens(&m, ex, &FeedPolicy::TeacherForcing, 0, &mut rng).unwrap();
        assert_eq!(trace.fed_tokens(), m.teacher_forced_tokens(&ex.targets));
        assert_eq!(trace.sources()[0], FedSource::Start);
        assert!(trace.sources()[1..].iter().all(|&s| s == FedSource::Truth));
    }

    #[test]
    fn constant_one_equals_teacher_forcing() {
        let (m, tr, _) = copy_setup();
        let ss = FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::Constant { epsilon: 1.0 },
            mode: SampleMode::Multinomial,
            granularity: Granularity::PerToken,
        };
        for ex in &tr.examples {
            let a = choose_fed_tokens(&m, ex, &ss, 3, &mut derive_rng(1, &[])).unwrap();
            let b = choose_fed_tokens(
                &m,
                ex,
                &FeedPolicy::TeacherForcing,
                3,
                &mut derive_rng(1, &[]),
            )
            .unwrap();
            assert_eq!(a.fed_tokens(), b.fed_tokens());
            assert_eq!(a.nll.to_bits(), b.nll.to_bits());
        }
    }

    #[test]
    fn constant_zero_argmax_replays_model() {
        let (m, tr, _) = copy_setup();
        let ss = FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::Constant { epsilon: 0.0 },
            mode: SampleMode::Argmax,
            granularity: Granularity::PerToken,
        };
        for ex in &tr.examples {
            let trace = choose_fed_tokens(&m, ex, &ss, 0, &mut derive_rng(5, &[])).unwrap();
            let fed = trace.fed_tokens();
            // replay step by step: each fed token is the argmax of the step before
            let (mut state, mut logits) = m.initial_state(&ex.input).unwrap();
            for &tok in &fed[1..] {
                assert_eq!(tok, argmax(&logits));
                let (s, l) = m.step(&state, tok, None).unwrap();
                state = s;
                logits = l;
            }
        }
    }

    #[test]
    fn truth_frequency_matches_epsilon() {
        let (m, tr, _) = copy_setup();
        let eps = 0.3;
        let ss = FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::Constant { epsilon: eps },
            mode: SampleMode::Multinomial,
            granularity: Granularity::PerToken,
        };
        let mut truth = 0usize;
        let mut total = 0usize;
        for rep in 0..50u64 {
            for (k, ex) in tr.examples.iter().enumerate() {
                let trace =
                    choose_fed_tokens(&m, ex, &ss, 0, &mut derive_rng(rep, &[k as u64])).unwrap();
                for s in &trace.sources()[1..] {
                    total += 1;
                    truth += usize::from(*s == FedSource::Truth);
                }
            }
        }
        let f = truth as f64 / total as f64;
        let se = (eps * (1.0 - eps) / total as f64).sqrt();
        assert!((f - eps).abs() < 3.0 * se, "{f} vs {eps} (se {se})");
    }

    #[test]
    fn per_sequence_flips_once() {
        let (m, tr, _) = copy_setup();
        let ss = FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::Constant { epsilon: 0.5 },
            mode: SampleMode::Uniform,
            granularity: Granularity::PerSequence,
        };
        let mut seen = [false; 2];
        for (k, ex) in tr.examples.iter().enumerate() {
            let trace = choose_fed_tokens(&m, ex, &ss, 0, &mut derive_rng(9, &[k as u64])).unwrap();
            let src = &trace.sources()[1..];
            assert!(src.windows(2).all(|w| w[0] == w[1]));
            if let Some(s) = src.first() {
                seen[usize::from(*s == FedSource::Truth)] = true;
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn sampled_tokens_are_gradient_constants() {
        let (m, tr, _) = copy_setup();
        let policy = FeedPolicy::AlwaysSampling {
            mode: SampleMode::Multinomial,
        };
        let ex = &tr.examples[3];
        let trace = choose_fed_tokens(&m, ex, &policy, 0, &mut derive_rng(2, &[])).unwrap();
        let fed = trace.fed_tokens();
        let err = m.grad_check(&ex.input, &ex.targets, &fed, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        // the policy trace and a forward on the same tokens agree exactly
        let (nll, _) = m.forward(&ex.input, &ex.targets, &fed).unwrap();
        assert_eq!(nll.to_bits(), trace.nll.to_bits());
        let g1 = m.backward(&ex.input, &trace);
        let g2 = m.backward(
            &ex.input,
            &m.forward(&ex.input, &ex.targets, &fed).unwrap().1,
        );
        assert_eq!(g1, g2);
    }

    #[test]
    fn batch_gradient_is_sum_of_example_gradients() {
        let (m, tr, _) = copy_setup();
        let policy = FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::Constant { epsilon: 0.5 },
            mode: SampleMode::Multinomial,
            granularity: Granularity::PerToken,
        };
        let idx = [4, 1, 7];
        let (batch, _, _) = batch_gradient(&m, &tr, &idx, &policy, 2, 11, 0).unwrap();
        let mut sum = m.params.zeros_like();
        for &k in &idx {
            let (g, _, _) = batch_gradient(&m, &tr, &[k], &policy, 2, 11, 0).unwrap();
            sum.add_assign(&g);
        }
        for (a, b) in batch.tensors().iter().zip(sum.tensors().iter()) {
            for (x, y) in a.2.iter().zip(b.2) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_tracks_epsilon() {
        let (m, tr, va) = copy_setup();
        let schedule = DecaySchedule::Exponential { k: 0.9 };
        let policy = FeedPolicy::ScheduledSampling {
            schedule: schedule.clone(),
            mode: SampleMode::Argmax,
            granularity: Granularity::PerToken,
        };
        let cfg = small_cfg();
        let (m1, r1) = train(&m, &tr, &va, &policy, &cfg).unwrap();
        let (m2, r2) = train(&m, &tr, &va, &policy, &cfg).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(m1, m2);
        // 40 examples / 8 = 5 batches per epoch, 10 total, eval every 5
        assert_eq!(r1.records.len(), 2);
        for r in &r1.records {
            assert_eq!(r.epsilon, schedule.epsilon_at(r.step));
        }
        assert!(r1.records.windows(2).all(|w| w[0].step < w[1].step));
        let best = r1.best_record().unwrap();
        assert!(r1
            .records
            .iter()
            .all(|r| r.valid_decoding_fer >= best.valid_decoding_fer));
        assert_eq!(
            decoding_error(&m1, &va, &cfg.beam).unwrap(),
            best.valid_decoding_fer
        );
    }

    #[test]
    fn divergence_reports_batch() {
        let (m, tr, va) = copy_setup();
        let mut cfg = small_cfg();
        cfg.lr = 1e308;
        cfg.clip = 1e308;
        let err = train(&m, &tr, &va, &FeedPolicy::TeacherForcing, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (m, _, _) = copy_setup();
        let g = Generator::hmm(HmmTask::default(), 1).unwrap();
        let d = g.generate(2, Split::Train);
        assert!(train(&m, &d, &d, &FeedPolicy::TeacherForcing, &small_cfg()).is_err());
    }

    #[test]
    fn policy_schema() {
        let p: FeedPolicy = serde_json::from_str(
            r#"{"type":"scheduled_sampling","schedule":{"type":"inverse_sigmoid","k":10.0},"mode":"multinomial"}"#,
        )
        .unwrap();
        assert_eq!(p.epsilon(0), 10.0 / 11.0);
        let p: FeedPolicy =
            serde_json::from_str(r#"{"type":"always_sampling","mode":"uniform"}"#).unwrap();
        assert_eq!(p.epsilon(5), 0.0);
    }
}

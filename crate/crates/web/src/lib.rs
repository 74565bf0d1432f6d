//! Browser bindings. Every export takes plain numbers or JSON text and
//! returns JSON text, which `www/index.html` renders.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use schedsamp::decoder::{beam_search, exhaustive_search, greedy_decode, BeamConfig};
use schedsamp::metrics::{decoding_error, next_step_error};
use schedsamp::model::{InputMode, ModelConfig, SeqInput, SeqModel};
use schedsamp::schedule::DecaySchedule;
use schedsamp::tasks::{Generator, HmmTask, Split};
use schedsamp::trainer::{train, FeedPolicy, Granularity, SampleMode, TrainConfig};

fn js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// `points` evenly spaced samples of a schedule over `[0, steps]`.
pub fn schedule_curve_json(schedule: &str, steps: u32, points: u32) -> Result<Value, String> {
    let s: DecaySchedule = serde_json::from_str(schedule).map_err(|e| e.to_string())?;
    let s = s.validate().map_err(|e| e.to_string())?;
    let points = points.max(2);
    let samples: Vec<Value> = (0..points)
        .map(|p| {
            let i = (steps as u64 * p as u64) / (points as u64 - 1);
            json!([i, s.epsilon_at(i)])
        })
        .collect();
    Ok(json!({ "limit": s.limit(), "samples": samples }))
}

#[wasm_bindgen]
pub fn schedule_curve(schedule: &str, steps: u32, points: u32) -> Result<String, JsValue> {
    js(schedule_curve_json(schedule, steps, points))
}

/// Decodes with a random static-mode model three ways: greedy, beam of the
/// given width, and exhaustive enumeration.
pub fn beam_demo_json(seed: u32, vocab: u32, max_len: u32, width: u32) -> Result<Value, String> {
    let vocab = vocab.clamp(2, 6) as usize;
    let max_len = max_len.clamp(1, 6) as usize;
    let model = SeqModel::new(ModelConfig {
        vocab_size: vocab,
        embed_dim: 3,
        hidden_dim: 5,
        mode: InputMode::Static,
        input_dim: 3,
        init_scale: 1.0,
        seed: seed as u64,
    })
    .map_err(|e| e.to_string())?;
    let input = SeqInput::Static(
        (1..=3)
            .map(|j| (seed as f64 * 0.7 + j as f64).sin())
            .collect(),
    );
    let width = width.max(1) as usize;
    let cfg = BeamConfig {
        beam_width: width,
        num_results: width.min(5),
        max_len,
    };
    let beam = beam_search(&model, &input, &cfg).map_err(|e| e.to_string())?;
    let best = exhaustive_search(&model, &input, max_len).map_err(|e| e.to_string())?;
    let greedy = greedy_decode(&model, &input, max_len).map_err(|e| e.to_string())?;
    Ok(json!({
        "greedy": greedy,
        "beam": beam,
        "exhaustive": best,
        "beam_found_optimum": beam[0].tokens == best.tokens,
    }))
}

#[wasm_bindgen]
pub fn beam_demo(seed: u32, vocab: u32, max_len: u32, width: u32) -> Result<String, JsValue> {
    js(beam_demo_json(seed, vocab, max_len, width))
}

/// Trains a small frame-labelling model with a linear ramp of the truth
/// probability and reports next-step and decoding error on held-out data.
pub fn exposure_demo_json(
    seed: u32,
    epsilon_start: f64,
    epsilon_end: f64,
    epochs: u32,
) -> Result<Value, String> {
    let task = HmmTask {
        num_states: 5,
        feature_dim: 4,
        min_len: 20,
        max_len: 30,
        ..HmmTask::default()
    };
    let g = Generator::hmm(task, 3).map_err(|e| e.to_string())?;
    let tr = g.generate(80, Split::Train);
    let va = g.generate(20, Split::Valid);
    let te = g.generate(20, Split::Test);
    let epochs = epochs.clamp(1, 30) as usize;
    let batch_size = 8;
    let per_epoch = tr.len().div_ceil(batch_size) as u64;
    let policy = if epsilon_start == 1.0 && epsilon_end == 1.0 {
        FeedPolicy::TeacherForcing
    } else {
        FeedPolicy::ScheduledSampling {
            schedule: DecaySchedule::linear_ramp(
                epsilon_start,
                epsilon_end,
                per_epoch * epochs as u64 / 2 + 1,
            )
            .map_err(|e| e.to_string())?,
            mode: SampleMode::Multinomial,
            granularity: Granularity::PerToken,
        }
    };
    let model = SeqModel::new(ModelConfig {
        vocab_size: tr.vocab_size,
        embed_dim: 6,
        hidden_dim: 16,
        mode: InputMode::Aligned,
        input_dim: tr.input_dim,
        init_scale: 0.1,
        seed: seed as u64,
    })
    .map_err(|e| e.to_string())?;
    let beam = BeamConfig {
        beam_width: 3,
        num_results: 1,
        max_len: 30,
    };
    let cfg = TrainConfig {
        lr: 0.03,
        batch_size,
        epochs,
        clip: 5.0,
        seed: seed as u64,
        eval_every: per_epoch as usize,
        beam: beam.clone(),
    };
    let (best, report) = train(&model, &tr, &va, &policy, &cfg).map_err(|e| e.to_string())?;
    Ok(json!({
        "records": report.records,
        "test_next_step_fer": next_step_error(&best, &te).map_err(|e| e.to_string())?,
        "test_decoding_fer": decoding_error(&best, &te, &beam).map_err(|e| e.to_string())?,
    }))
}

#[wasm_bindgen]
pub fn exposure_demo(
    seed: u32,
    epsilon_start: f64,
    epsilon_end: f64,
    epochs: u32,
) -> Result<String, JsValue> {
    js(exposure_demo_json(seed, epsilon_start, epsilon_end, epochs))
}

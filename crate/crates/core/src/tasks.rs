//! Synthetic sequence tasks and the JSON-lines dataset format.
//!
//! Token indices are shared by all tasks: `0` is EOS and, in aligned
//! datasets, `1` is the start token `S`. Payload tokens follow.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_rng, RngState};
use crate::model::{InputMode, SeqInput, EOS, START};

#[derive(Clone, Debug, PartialEq)]
pub struct SeqExample {
    pub id: String,
    pub input: SeqInput,
    pub targets: Vec<usize>,
}

impl SeqExample {
    pub fn mode(&self) -> InputMode {
        self.input.mode()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

/// Set-copy task: the input is the indicator vector of a set of distinct
/// payload tokens, the target lists them in a fixed canonical order followed
/// by EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyTask {
    pub payload_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CopyTask {
    fn default() -> Self {
        CopyTask {
            payload_vocab: 10,
            min_len: 2,
            max_len: 6,
        }
    }
}

impl CopyTask {
    pub fn vocab_size(&self) -> usize {
        self.payload_vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload_vocab < 2 {
            return Err(Error::config("copy task needs payload_vocab >= 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > self.payload_vocab {
            return Err(Error::config(format!(
                "copy task length range {}..={} invalid for {} payload tokens",
                self.min_len, self.max_len, self.payload_vocab
            )));
        }
        Ok(())
    }
}

/// Frame-labelling task driven by a left-to-right semi-Markov chain.
///
/// Each state lasts at least `min_dwell` frames; afterwards it stays with
/// probability `stay_prob` per frame, otherwise moves one state ahead (with
/// probability `advance_one`) or two states ahead, wrapping around. Frames
/// are the state's mean vector plus isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmTask {
    pub num_states: usize,
    pub min_dwell: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub stay_prob: f64,
    pub advance_one: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for HmmTask {
    fn default() -> Self {
        HmmTask {
            num_states: 8,
            min_dwell: 4,
            feature_dim: 8,
            noise_sigma: 2.0,
            stay_prob: 0.75,
            advance_one: 0.75,
            min_len: 70,
            max_len: 90,
        }
    }
}

impl HmmTask {
    pub fn vocab_size(&self) -> usize {
        self.num_states + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states < 3 || self.min_dwell < 2 || self.feature_dim == 0 {
            return Err(Error::config(
                "hmm task needs num_states >= 3, min_dwell >= 2, feature_dim >= 1",
            ));
        }
        if !(self.noise_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.stay_prob)
            || !(0.0..=1.0).contains(&self.advance_one)
        {
            return Err(Error::config(
                "hmm task probabilities or noise out of range",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("hmm task length range invalid"));
        }
        Ok(())
    }

    /// Label token of hidden state `s`.
    pub fn label(s: usize) -> usize {
        s + 2
    }

    pub fn state(label: usize) -> usize {
        label - 2
    }
}

/// Generator parameters stored with a dataset so oracles can use them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Copy {
        #[serde(flatten)]
        task: CopyTask,
        seed: u64,
        /// Payload tokens in canonical emission order.
        order: Vec<usize>,
    },
    Hmm {
        #[serde(flatten)]
        task: HmmTask,
        seed: u64,
        /// Mean feature vector of every hidden state.
        means: Vec<Vec<f64>>,
    },
}

impl Generator {
    pub fn copy(task: CopyTask, seed: u64) -> Result<Self> {
        task.validate()?;
        let mut rng = derive_rng(seed, &[0]);
        let mut order: Vec<usize> = (1..=task.payload_vocab).collect();
        order.shuffle(&mut rng);
        Ok(Generator::Copy { task, seed, order })
    }

    pub fn hmm(task: HmmTask, seed: u64) -> Result<Self> {
        task.validate()?;
        let mut rng = derive_rng(seed, &[0]);
        let means = (0..task.num_states)
            .map(|_| {
                (0..task.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(Generator::Hmm { task, seed, means })
    }

    pub fn mode(&self) -> InputMode {
        match self {
            Generator::Copy { .. } => InputMode::Static,
            Generator::Hmm { .. } => InputMode::Aligned,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Generator::Copy { task, .. } => task.vocab_size(),
            Generator::Hmm { task, .. } => task.vocab_size(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Generator::Copy { task, .. } => task.vocab_size(),
            Generator::Hmm { task, .. } => task.feature_dim,
        }
    }

    /// Draws `n` examples of `split`. Splits use disjoint random streams
    /// while sharing the generator parameters.
    pub fn generate(&self, n: usize, split: Split) -> Dataset {
        let seed = match self {
            Generator::Copy { seed, .. } | Generator::Hmm { seed, .. } => *seed,
        };
        let mut rng = derive_rng(seed, &[split.stream()]);
        let examples = (0..n)
            .map(|k| {
                let id = format!("{}-{k:06}", split.as_str());
                match self {
                    Generator::Copy { task, order, .. } => sample_copy(task, order, id, &mut rng),
                    Generator::Hmm { task, means, .. } => sample_hmm(task, means, id, &mut rng),
                }
            })
            .collect();
        Dataset {
            mode: self.mode(),
            vocab_size: self.vocab_size(),
            input_dim: self.input_dim(),
            split,
            generator: Some(self.clone()),
            examples,
        }
    }
}

/// Builds a copy-task example from an explicit payload.
pub fn copy_example(id: impl Into<String>, payload: &[usize], vocab_size: usize) -> SeqExample {
    let mut x = vec![0.0; vocab_size];
    for &t in payload {
        x[t] = 1.0;
    }
    let mut targets = payload.to_vec();
    targets.push(EOS);
    SeqExample {
        id: id.into(),
        input: SeqInput::Static(x),
        targets,
    }
}

fn sample_copy(task: &CopyTask, order: &[usize], id: String, rng: &mut RngState) -> SeqExample {
    let len = rng.random_range(task.min_len..=task.max_len);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, order.len(), len).into_vec();
    picked.sort_unstable();
    let payload: Vec<usize> = picked.into_iter().map(|k| order[k]).collect();
    copy_example(id, &payload, task.vocab_size())
}

fn next_state(task: &HmmTask, s: usize, rng: &mut RngState) -> usize {
    let step = if rng.random::<f64>() < task.advance_one {
        1
    } else {
        2
    };
    (s + step) % task.num_states
}

/// Samples a label sequence of length `len` from the semi-Markov chain.
pub fn sample_hmm_states(task: &HmmTask, len: usize, rng: &mut RngState) -> Vec<usize> {
    let mut states = Vec::with_capacity(len);
    let mut s = rng.random_range(0..task.num_states);
    let mut run = 0;
    for _ in 0..len {
        if run >= task.min_dwell && rng.random::<f64>() >= task.stay_prob {
            s = next_state(task, s, rng);
            run = 0;
        }
        states.push(s);
        run += 1;
    }
    states
}

fn sample_hmm(task: &HmmTask, means: &[Vec<f64>], id: String, rng: &mut RngState) -> SeqExample {
    let len = rng.random_range(task.min_len..=task.max_len);
    let states = sample_hmm_states(task, len, rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let frames = states
        .iter()
        .map(|&s| {
            means[s]
                .iter()
                .map(|m| m + task.noise_sigma * noise.sample(rng))
                .collect()
        })
        .collect();
    SeqExample {
        id,
        input: SeqInput::Frames(frames),
        targets: states.into_iter().map(HmmTask::label).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: InputMode,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub split: Split,
    pub generator: Option<Generator>,
    pub examples: Vec<SeqExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks token ranges, EOS placement and input shapes.
    pub fn validate(&self) -> Result<()> {
        for ex in &self.examples {
            let bad = |msg: &str| Error::config(format!("example {}: {msg}", ex.id));
            if ex.mode() != self.mode {
                return Err(Error::ModeMismatch(format!(
                    "example {} is {} in a {} dataset",
                    ex.id,
                    ex.mode().as_str(),
                    self.mode.as_str()
                )));
            }
            if ex.targets.is_empty() {
                return Err(bad("empty targets"));
            }
            if let Some(&t) = ex.targets.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
            match &ex.input {
                SeqInput::Static(x) => {
                    if x.len() != self.input_dim {
                        return Err(bad("input length differs from input_dim"));
                    }
                    let eos_count = ex.targets.iter().filter(|&&t| t == EOS).count();
                    if eos_count != 1 || *ex.targets.last().unwrap() != EOS {
                        return Err(bad("static targets must end with exactly one EOS"));
                    }
                }
                SeqInput::Frames(frames) => {
                    if frames.len() != ex.targets.len() {
                        return Err(bad("frame count differs from target count"));
                    }
                    if frames.iter().any(|f| f.len() != self.input_dim) {
                        return Err(bad("frame length differs from input_dim"));
                    }
                    if ex.targets.iter().any(|&t| t == EOS || t == START) {
                        return Err(bad("aligned targets must not use reserved tokens"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total number of target tokens.
    pub fn num_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.targets.len()).sum()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf8 json")
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = HeaderRecord {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            mode: self.mode,
            vocab_size: self.vocab_size,
            input_dim: self.input_dim,
            eos: EOS,
            start: (self.mode == InputMode::Aligned).then_some(START),
            split: self.split,
            num_examples: self.examples.len(),
            generator: self.generator.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for ex in &self.examples {
            let (input, features) = match &ex.input {
                SeqInput::Static(x) => (Some(x.clone()), None),
                SeqInput::Frames(f) => (None, Some(f.clone())),
            };
            let rec = ExampleRecord {
                id: ex.id.clone(),
                mode: ex.mode(),
                input,
                features,
                targets: ex.targets.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        Self::parse_lines(lines.iter().map(String::as_str))
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self> {
        Self::parse_lines(s.lines())
    }

    fn parse_lines<'a>(mut lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header record".into()))?;
        let header: HeaderRecord =
            serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut examples = Vec::with_capacity(header.num_examples);
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExampleRecord =
                serde_json::from_str(line).map_err(|e| parse_err(k + 2, e.to_string()))?;
            let input = match (rec.mode, rec.input, rec.features) {
                (InputMode::Static, Some(x), None) => SeqInput::Static(x),
                (InputMode::Aligned, None, Some(f)) => SeqInput::Frames(f),
                _ => {
                    return Err(parse_err(
                        k + 2,
                        "mode must match exactly one of input/features".into(),
                    ))
                }
            };
            examples.push(SeqExample {
                id: rec.id,
                input,
                targets: rec.targets,
            });
        }
        if examples.len() != header.num_examples {
            return Err(Error::LengthMismatch {
                expected: header.num_examples,
                actual: examples.len(),
            });
        }
        let ds = Dataset {
            mode: header.mode,
            vocab_size: header.vocab_size,
            input_dim: header.input_dim,
            split: header.split,
            generator: header.generator,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }
}

const FORMAT_TAG: &str = "schedsamp-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    format: String,
    version: u32,
    mode: InputMode,
    vocab_size: usize,
    input_dim: usize,
    eos: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    start: Option<usize>,
    split: Split,
    num_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    generator: Option<Generator>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    mode: InputMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    input: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features: Option<Vec<Vec<f64>>>,
    targets: Vec<usize>,
}

/// Fraction of frames whose label equals the previous frame's label.
pub fn label_persistence(ds: &Dataset) -> f64 {
    let mut same = 0usize;
    let mut pairs = 0usize;
    for ex in &ds.examples {
        for w in ex.targets.windows(2) {
            pairs += 1;
            same += usize::from(w[0] == w[1]);
        }
    }
    if pairs == 0 {
        0.0
    } else {
        same as f64 / pairs as f64
    }
}

/// Per-frame classifier that sees only the current frame: nearest state
/// mean (maximum likelihood under a uniform prior). Returns a label token.
pub fn nearest_mean_label(means: &[Vec<f64>], frame: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (s, m) in means.iter().enumerate() {
        let d: f64 = m.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = s;
        }
    }
    HmmTask::label(best)
}

/// Bayes-optimal next-step prediction for the semi-Markov task: combines
/// the exact transition prior given the true label history with the frame
/// likelihood. Returns the predicted label token for every frame.
pub fn bayes_next_step_labels(
    task: &HmmTask,
    means: &[Vec<f64>],
    frames: &[Vec<f64>],
    truth: &[usize],
) -> Vec<usize> {
    let n = task.num_states;
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let mut log_prior = vec![f64::NEG_INFINITY; n];
        if t == 0 {
            log_prior.fill(-(n as f64).ln());
        } else {
            let prev = HmmTask::state(truth[t - 1]);
            let run = truth[..t]
                .iter()
                .rev()
                .take_while(|&&y| y == truth[t - 1])
                .count();
            if run < task.min_dwell {
                log_prior[prev] = 0.0;
            } else {
                let mv = 1.0 - task.stay_prob;
                let mut add = |s: usize, p: f64| {
                    if p > 0.0 {
                        let cur = log_prior[s];
                        let v = if cur == f64::NEG_INFINITY {
                            0.0
                        } else {
                            cur.exp()
                        };
                        log_prior[s] = (v + p).ln();
                    }
                };
                add(prev, task.stay_prob);
                add((prev + 1) % n, mv * task.advance_one);
                add((prev + 2) % n, mv * (1.0 - task.advance_one));
            }
        }
        let score = |s: usize| -> f64 {
            if log_prior[s] == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let d: f64 = means[s]
                .iter()
                .zip(frame)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if task.noise_sigma == 0.0 {
                // noiseless: likelihood is a point mass, prior breaks exact ties only
                -d * 1e12 + log_prior[s]
            } else {
                log_prior[s] - d / (2.0 * task.noise_sigma * task.noise_sigma)
            }
        };
        let best = (0..n)
            .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
            .unwrap();
        out.push(HmmTask::label(best));
    }
    out
}

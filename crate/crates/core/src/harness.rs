//! Config-driven commands: data generation, training, evaluation, the
//! ablation grid and gradient checking.
//!
//! Every command writes the resolved configuration it ran with as
//! `config.json` in its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoder::{write_decodes, BeamConfig};
use crate::error::{Error, Result};
use crate::math::derive_rng;
use crate::metrics::{evaluate, EvalMetrics};
use crate::model::{InputMode, ModelConfig, SeqModel};
use crate::schedule::DecaySchedule;
use crate::tasks::{CopyTask, Dataset, Generator, HmmTask, Split};
use crate::trainer::{
    choose_fed_tokens, train_with_progress, FeedPolicy, Granularity, SampleMode, TrainConfig,
    TrainReport,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.csv";
pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const DECODES_FILE: &str = "decodes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// Model hyperparameters. Vocabulary size, mode and input width are taken
/// from the data when omitted and must agree with it when given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<InputMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    /// In mini-batches.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Copy(CopyTask),
    Hmm(HmmTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    /// Synthesize the splits from a task generator.
    Generate {
        task: TaskSpec,
        seed: u64,
        sizes: SplitSizes,
    },
    /// Read `train.jsonl`, `valid.jsonl` and `test.jsonl` from a directory.
    Files { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seed for parameter initialization and training randomness.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub policy: FeedPolicy,
    #[serde(default)]
    pub beam: BeamConfig,
    pub data: DataSpec,
    pub output_dir: PathBuf,
}

/// Command-line values that replace the corresponding config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        check_schema(cfg.schema_version)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip: t.clip,
            seed: self.seed,
            eval_every: t.eval_every,
            beam: self.beam.clone(),
        }
    }

    /// Fills the data-dependent model fields from `ds`, rejecting any
    /// explicit value that disagrees.
    pub fn resolve_model(&mut self, ds: &Dataset) -> Result<ModelConfig> {
        let m = &mut self.model;
        fn agree<T: PartialEq + Copy + std::fmt::Debug>(
            slot: &mut Option<T>,
            actual: T,
            what: &str,
        ) -> Result<T> {
            match *slot {
                Some(v) if v != actual => Err(Error::config(format!(
                    "model {what} is {v:?} but the data has {actual:?}"
                ))),
                _ => {
                    *slot = Some(actual);
                    Ok(actual)
                }
            }
        }
        let cfg = ModelConfig {
            vocab_size: agree(&mut m.vocab_size, ds.vocab_size, "vocab_size")?,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            mode: agree(&mut m.mode, ds.mode, "mode")?,
            input_dim: agree(&mut m.input_dim, ds.input_dim, "input_dim")?,
            init_scale: m.init_scale,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        self.train_config().validate()?;
        self.policy.validate()
    }
}

/// The three splits of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    fn iter(&self) -> [(&'static str, &Dataset); 3] {
        [
            ("train.jsonl", &self.train),
            ("valid.jsonl", &self.valid),
            ("test.jsonl", &self.test),
        ]
    }
}

pub fn build_generator(task: &TaskSpec, seed: u64) -> Result<Generator> {
    match task {
        TaskSpec::Copy(t) => Generator::copy(t.clone(), seed),
        TaskSpec::Hmm(t) => Generator::hmm(t.clone(), seed),
    }
}

/// Generates or reads the data described by `spec`.
pub fn load_splits(spec: &DataSpec) -> Result<Splits> {
    let splits = match spec {
        DataSpec::Generate { task, seed, sizes } => {
            let g = build_generator(task, *seed)?;
            Splits {
                train: g.generate(sizes.train, Split::Train),
                valid: g.generate(sizes.valid, Split::Valid),
                test: g.generate(sizes.test, Split::Test),
            }
        }
        DataSpec::Files { dir } => Splits {
            train: Dataset::read_jsonl(&dir.join("train.jsonl"))?,
            valid: Dataset::read_jsonl(&dir.join("valid.jsonl"))?,
            test: Dataset::read_jsonl(&dir.join("test.jsonl"))?,
        },
    };
    for (name, ds) in splits.iter() {
        if ds.is_empty() {
            return Err(Error::config(format!("{name} has no examples")));
        }
        if ds.mode != splits.train.mode
            || ds.vocab_size != splits.train.vocab_size
            || ds.input_dim != splits.train.input_dim
        {
            return Err(Error::ModeMismatch(format!(
                "{name} disagrees with train.jsonl on mode, vocabulary or input width"
            )));
        }
    }
    Ok(splits)
}

/// Writes train/valid/test JSONL files plus the config into the output
/// directory. Requires a generating data spec.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Splits> {
    check_schema(cfg.schema_version)?;
    if !matches!(cfg.data, DataSpec::Generate { .. }) {
        return Err(Error::config("gen needs data.source = \"generate\""));
    }
    let splits = load_splits(&cfg.data)?;
    ensure_dir(&cfg.output_dir)?;
    for (name, ds) in splits.iter() {
        ds.write_jsonl(&cfg.output_dir.join(name))?;
    }
    write_json(&cfg.output_dir.join(CONFIG_FILE), cfg)?;
    Ok(splits)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters with the best validation decoding error.
    pub best: SeqModel,
    pub last: SeqModel,
}

fn run_training(cfg: &mut ExperimentConfig, splits: &Splits) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.resolve_model(&splits.train)?;
    let model = SeqModel::new(model_cfg)?;
    let tcfg = cfg.train_config();
    let mut last = model.clone();
    let (best, report) = train_with_progress(
        &model,
        &splits.train,
        &splits.valid,
        &cfg.policy,
        &tcfg,
        |_, cur| last = cur.clone(),
    )?;
    Ok(TrainOutcome { report, best, last })
}

fn write_training(cfg: &ExperimentConfig, out: &TrainOutcome) -> Result<()> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    out.report.write_csv(&dir.join(REPORT_FILE))?;
    checkpoint::save(&out.best, &dir.join(BEST_CHECKPOINT))?;
    checkpoint::save(&out.last, &dir.join(FINAL_CHECKPOINT))
}

/// Trains with the configured policy. Writes the report CSV, the
/// best-validation checkpoint (`model.ckpt`), the parameters after the last
/// evaluation (`final.ckpt`) and the resolved config.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let splits = load_splits(&cfg.data)?;
    let out = run_training(&mut cfg, &splits)?;
    write_training(&cfg, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub beam: BeamConfig,
    pub output_dir: PathBuf,
}

/// Scores a checkpoint on a dataset and writes `metrics.json` and the
/// decoded hypotheses as `decodes.jsonl`.
pub fn cmd_eval(cfg: &EvalConfig) -> Result<EvalMetrics> {
    cfg.beam.validate()?;
    let model = checkpoint::load(&cfg.checkpoint)?;
    let ds = Dataset::read_jsonl(&cfg.dataset)?;
    let (metrics, records) = evaluate(&model, &ds, &cfg.beam)?;
    ensure_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(CONFIG_FILE), cfg)?;
    write_json(&cfg.output_dir.join(METRICS_FILE), &metrics)?;
    write_decodes(&cfg.output_dir.join(DECODES_FILE), &records)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub name: String,
    pub policy: FeedPolicy,
}

/// A set of feed policies crossed with seeds, sharing one experiment
/// template. The template's own policy and output directory are replaced
/// per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub schema_version: u32,
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub configurations: Vec<GridEntry>,
    pub output_dir: PathBuf,
}

impl GridConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        check_schema(cfg.schema_version)?;
        check_schema(cfg.experiment.schema_version)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// The five feed policies of the frame-labelling comparison: always
    /// sampling, three linear ramps of the truth probability and the
    /// teacher-forced baseline. Ramps last `ramp_steps` mini-batches.
    pub fn exposure_bias_entries(ramp_steps: u64) -> Vec<GridEntry> {
        let ramp = |name: &str, start: f64, end: f64| GridEntry {
            name: name.into(),
            policy: FeedPolicy::ScheduledSampling {
                schedule: DecaySchedule::LinearRamp {
                    epsilon_start: start,
                    epsilon_end: end,
                    ramp_steps,
                },
                mode: SampleMode::Multinomial,
                granularity: Granularity::PerToken,
            },
        };
        vec![
            GridEntry {
                name: "always_sampling".into(),
                policy: FeedPolicy::AlwaysSampling {
                    mode: SampleMode::Multinomial,
                },
            },
            GridEntry {
                name: "baseline".into(),
                policy: FeedPolicy::TeacherForcing,
            },
            ramp("scheduled_sampling_1", 0.25, 0.0),
            ramp("scheduled_sampling_2", 0.5, 0.0),
            ramp("scheduled_sampling_3", 0.9, 0.5),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.seeds.is_empty() || self.configurations.is_empty() {
            return Err(Error::config(
                "grid needs at least one seed and one configuration",
            ));
        }
        let mut names: Vec<&str> = self
            .configurations
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("grid configuration names must be unique"));
        }
        if names
            .iter()
            .any(|n| n.is_empty() || n.contains(['/', ',', '\\']))
        {
            return Err(Error::config(
                "grid configuration names must be nonempty and plain",
            ));
        }
        Ok(())
    }
}

/// One line of the grid summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: String,
    /// Seed, or `None` for the mean row.
    pub seed: Option<u64>,
    pub eps_start: f64,
    pub eps_end: f64,
    pub next_step_fer: Option<f64>,
    pub decoding_fer: Option<f64>,
    /// Error message of a failed cell.
    pub error: Option<String>,
}

pub const SUMMARY_HEADER: &str = "config,seed,eps_start,eps_end,next_step_fer,decoding_fer,status";

pub fn policy_endpoints(p: &FeedPolicy) -> (f64, f64) {
    match p {
        FeedPolicy::TeacherForcing => (1.0, 1.0),
        FeedPolicy::AlwaysSampling { .. } => (0.0, 0.0),
        FeedPolicy::ScheduledSampling { schedule, .. } => {
            (schedule.epsilon_at(0), schedule.limit())
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn summary_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {}", e.replace([',', '\n', '\r'], " ")),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.config,
            r.seed
                .map(|s| s.to_string())
                .unwrap_or_else(|| "mean".into()),
            r.eps_start,
            r.eps_end,
            opt(r.next_step_fer),
            opt(r.decoding_fer),
            status
        );
    }
    out
}

/// Summary of one grid cell: the lowest validation next-step error over
/// all evaluations, and the test decoding error of the checkpoint selected
/// by validation decoding error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub next_step_fer: f64,
    pub decoding_fer: f64,
    /// Full test-set metrics of the selected checkpoint.
    pub test: EvalMetrics,
}

fn run_cell(cfg: &mut ExperimentConfig, splits: &Splits) -> Result<CellMetrics> {
    let out = run_training(cfg, splits)?;
    write_training(cfg, &out)?;
    let (test, _) = evaluate(&out.best, &splits.test, &cfg.beam)?;
    let next_step_fer = out
        .report
        .records
        .iter()
        .map(|r| r.valid_next_step_fer)
        .fold(f64::INFINITY, f64::min);
    let metrics = CellMetrics {
        next_step_fer,
        decoding_fer: test.decoding_fer,
        test,
    };
    write_json(&cfg.output_dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every (configuration, seed) cell in lexicographic order of
/// configuration name then seed, writing each cell under
/// `<output_dir>/<name>/seed-<seed>/` and the table to `summary.csv`.
/// A failing cell is recorded in its row and the grid moves on.
pub fn cmd_grid(cfg: &GridConfig) -> Result<Vec<GridRow>> {
    cmd_grid_with(cfg, |_| {})
}

/// [`cmd_grid`] with a callback receiving every row as it is produced.
pub fn cmd_grid_with<F: FnMut(&GridRow)>(cfg: &GridConfig, mut on_row: F) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let splits = load_splits(&cfg.experiment.data)?;
    ensure_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(CONFIG_FILE), cfg)?;

    let mut entries = cfg.configurations.clone();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let mut rows = Vec::new();
    for entry in &entries {
        let (eps_start, eps_end) = policy_endpoints(&entry.policy);
        let first = rows.len();
        for &seed in &seeds {
            let mut cell = cfg.experiment.clone();
            cell.seed = seed;
            cell.policy = entry.policy.clone();
            cell.output_dir = cfg
                .output_dir
                .join(&entry.name)
                .join(format!("seed-{seed}"));
            let result = run_cell(&mut cell, &splits);
            let row = GridRow {
                config: entry.name.clone(),
                seed: Some(seed),
                eps_start,
                eps_end,
                next_step_fer: result.as_ref().ok().map(|m| m.next_step_fer),
                decoding_fer: result.as_ref().ok().map(|m| m.decoding_fer),
                error: result.err().map(|e| format!("{}: {e}", e.kind())),
            };
            on_row(&row);
            rows.push(row);
        }
        let cells = &rows[first..];
        let row = GridRow {
            config: entry.name.clone(),
            seed: None,
            eps_start,
            eps_end,
            next_step_fer: mean(cells.iter().filter_map(|r| r.next_step_fer)),
            decoding_fer: mean(cells.iter().filter_map(|r| r.decoding_fer)),
            error: cells
                .iter()
                .all(|r| r.error.is_some())
                .then(|| "all cells failed".to_string()),
        };
        on_row(&row);
        rows.push(row);
    }
    let path = cfg.output_dir.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub id: String,
    pub fed: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub fd_step: f64,
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
}

/// Finite-difference check of the freshly initialized model on the first
/// `n` training examples, once with teacher-forced inputs and once with
/// tokens chosen by the configured policy at mini-batch 0.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, n: usize, fd_step: f64) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let splits = load_splits(&cfg.data)?;
    let model = SeqModel::new(cfg.resolve_model(&splits.train)?)?;
    let mut cases = Vec::new();
    for (k, ex) in splits.train.examples.iter().take(n).enumerate() {
        let tf = model.teacher_forced_tokens(&ex.targets);
        let mut rng = derive_rng(cfg.seed, &[0, k as u64]);
        let policy_fed = choose_fed_tokens(&model, ex, &cfg.policy, 0, &mut rng)?.fed_tokens();
        for (label, fed) in [("teacher_forced", tf), ("policy", policy_fed)] {
            cases.push(GradcheckCase {
                id: ex.id.clone(),
                fed: label.into(),
                max_rel_error: model.grad_check(&ex.input, &ex.targets, &fed, fd_step)?,
            });
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let report = GradcheckReport {
        fd_step,
        cases,
        max_rel_error,
    };
    ensure_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(CONFIG_FILE), &cfg)?;
    write_json(&cfg.output_dir.join(GRADCHECK_FILE), &report)?;
    Ok(report)
}

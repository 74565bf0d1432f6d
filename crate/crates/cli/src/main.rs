use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use schedsamp::decoder::BeamConfig;
use schedsamp::harness::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_grid_with, cmd_train, EvalConfig, ExperimentConfig,
    GridConfig, Overrides,
};
use schedsamp::Error;

#[derive(Parser)]
#[command(
    name = "schedsamp",
    version,
    about = "Scheduled sampling experiments for recurrent sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed (for `gen`, the data seed; for `grid`,
    /// runs that single seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
        }
    }

    fn config_path(&self) -> Result<&PathBuf, Error> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--config is required".into()))
    }

    fn experiment(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::from_path(self.config_path()?)?;
        cfg.apply(&self.overrides());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train/valid/test JSONL datasets.
    Gen(Common),
    /// Train a model and write its report and checkpoints.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset JSONL file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        num_results: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Run every configuration of a grid over several seeds.
    Grid(Common),
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of training examples to check.
        #[arg(long, default_value_t = 3)]
        examples: usize,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
    },
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(c) => {
            let mut cfg = ExperimentConfig::from_path(c.config_path()?)?;
            if let Some(out) = &c.out {
                cfg.output_dir = out.clone();
            }
            if let (Some(seed), schedsamp::harness::DataSpec::Generate { seed: s, .. }) =
                (c.seed, &mut cfg.data)
            {
                *s = seed;
            }
            let splits = cmd_gen(&cfg)?;
            print(json!({
                "command": "gen",
                "output_dir": cfg.output_dir,
                "train": splits.train.len(),
                "valid": splits.valid.len(),
                "test": splits.test.len(),
            }));
        }
        Command::Train(c) => {
            let cfg = c.experiment()?;
            let out = cmd_train(&cfg)?;
            print(json!({
                "command": "train",
                "output_dir": cfg.output_dir,
                "best": out.report.best_record(),
                "final": out.report.records.last(),
            }));
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            beam_width,
            num_results,
            max_len,
        } => {
            let mut cfg = match &common.config {
                Some(p) => serde_json::from_str::<EvalConfig>(
                    &std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?,
                )?,
                None => EvalConfig {
                    checkpoint: checkpoint
                        .clone()
                        .ok_or_else(|| Error::InvalidConfig("--checkpoint is required".into()))?,
                    dataset: data
                        .clone()
                        .ok_or_else(|| Error::InvalidConfig("--data is required".into()))?,
                    beam: BeamConfig::default(),
                    output_dir: common
                        .out
                        .clone()
                        .ok_or_else(|| Error::InvalidConfig("--out is required".into()))?,
                },
            };
            if let Some(p) = checkpoint {
                cfg.checkpoint = p;
            }
            if let Some(p) = data {
                cfg.dataset = p;
            }
            if let Some(p) = common.out {
                cfg.output_dir = p;
            }
            if let Some(w) = beam_width {
                cfg.beam.beam_width = w;
            }
            if let Some(n) = num_results {
                cfg.beam.num_results = n;
            }
            if let Some(m) = max_len {
                cfg.beam.max_len = m;
            }
            let metrics = cmd_eval(&cfg)?;
            print(json!({ "command": "eval", "output_dir": cfg.output_dir, "metrics": metrics }));
        }
        Command::Grid(c) => {
            let mut cfg = GridConfig::from_path(c.config_path()?)?;
            cfg.apply(&c.overrides());
            cmd_grid_with(&cfg, |row| {
                eprintln!("{}", serde_json::to_string(row).unwrap_or_default());
            })?;
            print(json!({
                "command": "grid",
                "summary": cfg.output_dir.join(schedsamp::harness::SUMMARY_FILE),
            }));
        }
        Command::Gradcheck {
            common,
            examples,
            fd_step,
        } => {
            let cfg = common.experiment()?;
            let report = cmd_gradcheck(&cfg, examples, fd_step)?;
            print(json!({
                "command": "gradcheck",
                "output_dir": cfg.output_dir,
                "max_rel_error": report.max_rel_error,
                "cases": report.cases.len(),
            }));
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": { "kind": kind, "message": message } })
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

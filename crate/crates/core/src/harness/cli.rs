//! Command-line surface of the `condmoe` binary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::Config;
use super::data::{Suite, TaskKind};
use super::run;
use crate::error::{Error, Result};
use crate::interference::{write_matrices_csv, write_records};

#[derive(Debug, Parser)]
#[command(name = "condmoe", version, about = "Conditional mixture-of-experts laboratory")]
pub struct Cli {
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for run outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Overrides the number of training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a run directory.
    Train { config: PathBuf },
    /// Record per-task block gradients and write interference matrices.
    Interfere { checkpoint: PathBuf, config: PathBuf },
    /// Held-out loss and accuracy of one task.
    Eval { checkpoint: PathBuf, task: String },
    /// Evaluate a task presented under an unseen task id.
    Zeroshot { checkpoint: PathBuf, task: String },
    /// Compare MoE inference with the merged dense path.
    Reparam { checkpoint: PathBuf },
    /// Write expert usage histograms.
    Usage { checkpoint: PathBuf },
}

fn parse_task(suite: &Suite, s: &str) -> Result<usize> {
    if let Ok(i) = s.parse::<usize>() {
        return if i < suite.tasks().len() {
            Ok(i)
        } else {
            Err(Error::UnknownTask {
                task_id: i,
                known: suite.tasks().len(),
            })
        };
    }
    TaskKind::parse(s)
        .map(|k| k as usize)
        .ok_or_else(|| Error::param(format!("unknown task {s:?}; expected img_cls, mlm, caption or an index")))
}

fn load(path: &Path) -> Result<(Config, Suite, super::model::Model)> {
    run::load_checkpoint(path)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let mut cfg = Config::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            if let Some(steps) = cli.steps {
                cfg.train.steps = steps;
            }
            let summary = run::run_experiment(&cfg, &cli.out_dir)?;
            print_json(&summary)
        }
        Command::Interfere { checkpoint, config } => {
            let (_, suite, model) = load(&checkpoint)?;
            let cfg = Config::load(&config)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let (records, matrices) = run::interfere(&model, &suite, &cfg, seed)?;
            fs::create_dir_all(&cli.out_dir)?;
            write_records(&records, BufWriter::new(File::create(cli.out_dir.join("gradients.bin"))?))?;
            write_matrices_csv(&matrices, File::create(cli.out_dir.join("interference.csv"))?)?;
            for m in &matrices {
                println!("{}", m.block_id);
                for row in &m.values {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
                    println!("  {}", cells.join(" "));
                }
            }
            Ok(())
        }
        Command::Eval { checkpoint, task } => {
            let (_, suite, model) = load(&checkpoint)?;
            let t = parse_task(&suite, &task)?;
            let r = run::eval_task(&model, &suite, t)?;
            print_json(&serde_json::json!({"task": suite.tasks()[t].name, "loss": r.loss, "accuracy": r.accuracy}))
        }
        Command::Zeroshot { checkpoint, task } => {
            let (_, suite, model) = load(&checkpoint)?;
            let t = parse_task(&suite, &task)?;
            let r = run::zero_shot_eval(&model, &suite, t)?;
            print_json(&serde_json::json!({
                "source_task": suite.tasks()[t].name,
                "task_id": model.num_tasks(),
                "loss": r.loss,
                "accuracy": r.accuracy,
            }))
        }
        Command::Reparam { checkpoint } => {
            let (_, suite, model) = load(&checkpoint)?;
            print_json(&run::compare_reparam_inference(&model, &suite)?)
        }
        Command::Usage { checkpoint } => {
            let (_, suite, model) = load(&checkpoint)?;
            let hist = run::usage_histogram(&model, &suite)?;
            fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join("usage.csv");
            hist.write_csv(File::create(&path)?)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

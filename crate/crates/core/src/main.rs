use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualgate::checkpoint::Checkpoint;
use dualgate::config::RunConfig;
use dualgate::trainer::{self, MOVING_AVERAGE_WINDOW};
use dualgate::Error;

#[derive(Parser)]
#[command(name = "dualgate", version, about = "PPO control of a two-gate resin infusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on fresh fields.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trace one greedy episode, optionally writing a frame per step.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Field seed.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        render: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Pick substeps_per_action from Both-gates runs on random fields.
    Calibrate {
        /// Field, solver and reward settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        fields: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Desired median episode length in control steps.
        #[arg(long, default_value_t = 70.0)]
        target: f64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = trainer::train(&cfg)?;
            println!(
                "trained {} episodes in {} batches; final moving_avg_{} = {:.4}",
                summary.scores.len(),
                summary.batches,
                MOVING_AVERAGE_WINDOW,
                summary.moving_average.last().copied().unwrap_or(0.0)
            );
            println!("final checkpoint: {}", summary.final_checkpoint.display());
            if let Some(e) = summary.evaluation {
                println!(
                    "greedy evaluation over {} episodes: mean {:.4} std {:.4}",
                    e.scores.len(),
                    e.mean,
                    e.std
                );
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let s = trainer::evaluate_checkpoint(&ck, episodes, seed)?;
            println!("episodes {}", s.scores.len());
            println!("mean {}", s.mean);
            println!("std {}", s.std);
            println!("min {}", s.min);
            println!("max {}", s.max);
        }
        Command::Rollout {
            checkpoint,
            seed,
            render,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let r = trainer::rollout(&ck.policy, &ck.config.env(), seed, &out, render)?;
            println!(
                "steps {} score {:.4} frames {} -> {}",
                r.steps,
                r.score,
                r.frames,
                r.dir.display()
            );
        }
        Command::Calibrate {
            config,
            fields,
            seed,
            target,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => RunConfig::default(),
            };
            let c = trainer::calibrate(&cfg.env(), fields, seed, target)?;
            for &(s, m) in c.candidates.iter().filter(|(s, _)| *s <= 2 * c.chosen + 2) {
                println!("substeps_per_action {s:>3}: median episode length {m}");
            }
            println!("chosen substeps_per_action = {}", c.chosen);
            println!("median episode length = {}", c.median_length);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

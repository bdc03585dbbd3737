use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fcmnet::arch::ActMode;
use fcmnet::harness::{cmd_eval, cmd_gradcheck, cmd_sweep_loss, cmd_train, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fcmnet",
    version,
    about = "Train and probe FCMNet agents on hidden-goal path-finding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an actor-critic pair and evaluate it periodically.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (greedy unless --sample is given).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, conflicts_with = "sample")]
        greedy: bool,
        #[arg(long)]
        sample: bool,
    },
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train one run per message-loss probability.
    SweepLoss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        probs: Vec<f64>,
    },
}

fn run(cli: Cli) -> fcmnet::Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
            Ok(true)
        }
        Command::Eval {
            ckpt,
            episodes,
            greedy: _,
            sample,
        } => {
            let mode = if sample {
                ActMode::Sample
            } else {
                ActMode::Greedy
            };
            let report = cmd_eval(&ckpt, episodes, mode)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Gradcheck { config, tol } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cmd_gradcheck(&cfg, tol)?;
            print!("{}", report.render());
            Ok(report.pass)
        }
        Command::SweepLoss { config, probs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = cmd_sweep_loss(&cfg, &probs)?;
            println!("loss_p,final_mean_length,converged");
            for r in rows {
                println!("{},{},{}", r.loss_p, r.final_mean_length, r.converged);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use deer_core::agent::Mode;
use deer_core::experiment::{
    cmd_collect, cmd_eval, cmd_pretrain, cmd_report, cmd_train, ExperimentConfig, Selection,
};

#[derive(Parser)]
#[command(
    name = "deer",
    version,
    about = "Delay-resilient encoder-enhanced RL experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct Filter {
    /// Restrict to these modes (deer, sacas, dolps, online-deer).
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    mode: Vec<Mode>,
    /// Restrict to these seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl Filter {
    fn selection(&self) -> Selection {
        Selection {
            modes: (!self.mode.is_empty()).then(|| self.mode.clone()),
            seeds: (!self.seeds.is_empty()).then(|| self.seeds.clone()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Collect random and expert trajectories into the dataset.
    Collect(Common),
    /// Pretrain the sequence encoder(s) on the dataset.
    Pretrain(Common),
    /// Train SAC agents for every mode, delay and seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: Filter,
    },
    /// Re-evaluate stored policies.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: Filter,
    },
    /// Aggregate learning curves into CSV and JSON tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: Filter,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: deer_core::Error| e.to_string())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect(common) => {
            let cfg = load(&common)?;
            let s = cmd_collect(&cfg)?;
            println!(
                "dataset {} ({} random, {} expert), expert return {:.4}",
                s.dataset_hash,
                s.random_trajectories,
                s.expert_trajectories,
                s.expert.expert_return
            );
        }
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            for s in cmd_pretrain(&cfg)? {
                let worst = s.test_mse_per_dim.iter().cloned().fold(0.0, f64::max);
                println!(
                    "k1={} checkpoint {} test loss {:.6} max per-dim mse {:.6}",
                    s.k1, s.checkpoint_hash, s.test_loss, worst
                );
            }
        }
        Command::Train { common, filter } => {
            let cfg = load(&common)?;
            for s in cmd_train(&cfg, &filter.selection())? {
                println!("{} final return {:.4}", s.id, s.final_return);
            }
        }
        Command::Eval { common, filter } => {
            let cfg = load(&common)?;
            for r in cmd_eval(&cfg, &filter.selection())? {
                println!(
                    "{} return {:.4} (delivered {:.4})",
                    r.id, r.return_true, r.return_delivered
                );
            }
        }
        Command::Report { common, filter } => {
            let cfg = load(&common)?;
            let report = cmd_report(&cfg, &filter.selection())?;
            println!("mode,k1,delay,median_normalized,variance_normalized");
            for r in &report.records {
                println!(
                    "{},{},{},{:.4},{:.4}",
                    r.mode.as_str(),
                    r.k1.map(|k| k.to_string()).unwrap_or_default(),
                    r.delay,
                    r.median_normalized,
                    r.variance_normalized
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `hoi`: generate synthetic interaction data, train the forecasting model,
//! sample forecasts, evaluate them, run the ablation and plot trajectories.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hoi_core::config::RunConfig;
use hoi_core::data::{read_dataset, write_dataset};
use hoi_core::nn::checkpoint;
use hoi_core::pipeline;
use hoi_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hoi", version, about = "Human-object interaction forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (one JSON record per line).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the three training stages, writing `stage<N>.ckpt` and `loss.log`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Continue after the latest stage checkpoint in `out_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast the future frames of every sequence.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metric table and write the JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Train and evaluate the four model variants per seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `ablation.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one SVG of joint and centroid trajectories per sequence.
    Plot {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, count, seed } => {
            let cfg = load_config(config.as_deref())?;
            let seqs = pipeline::generate(&cfg, count.unwrap_or(cfg.data.count), seed)?;
            write_dataset(&out, &seqs)?;
            println!("{}", pipeline::dataset_summary(&seqs));
        }
        Command::Train { config, data, out_dir, seed, resume } => {
            let cfg = load_config(config.as_deref())?;
            let seqs = read_dataset(&data)?;
            let summary = pipeline::train_run(&cfg, &seqs, &out_dir, seed, resume)?;
            if let Some(last) = summary.records.last() {
                println!("{last}");
            }
            for p in &summary.checkpoints {
                println!("wrote {}", p.display());
            }
        }
        Command::Sample { checkpoint: ckpt, data, seed, out } => {
            let ckpt = checkpoint::load(&ckpt)?;
            let preds = pipeline::sample_run(&ckpt, &read_dataset(&data)?, seed)?;
            write_dataset(&out, &preds)?;
            println!("{} forecasts written to {}", preds.len(), out.display());
        }
        Command::Eval { checkpoint: ckpt, data, seed, out, samples } => {
            let ckpt = checkpoint::load(&ckpt)?;
            let report = pipeline::eval_run(&ckpt, &read_dataset(&data)?, seed, samples)?;
            print!("{}", report.table());
            write_text(&out, &report.to_json())?;
        }
        Command::Ablate { config, data, seeds, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            let report = pipeline::ablate(&cfg, &read_dataset(&data)?, &mut |m| eprintln!("{m}"))?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_text(&out, &report.to_json())?;
            }
        }
        Command::Plot { predictions, gt, out_dir } => {
            let files = pipeline::plot_run(&read_dataset(&predictions)?, &read_dataset(&gt)?, &out_dir)?;
            println!("{} plots written to {}", files.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

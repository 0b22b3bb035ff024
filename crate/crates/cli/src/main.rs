use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mvanet::config::CONFIG_ENV;
use mvanet::data::{generate_synthetic, load_dataset, write_dataset, write_pgm};
use mvanet::train::{bench_attention, bench_throughput, evaluate, infer, restore, train};
use mvanet::{Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "mvanet", version, about = "Multi-view aggregation network for dichotomous image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic thin-structure dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a configuration file.
    Train {
        #[arg(long, env = CONFIG_ENV)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one image and write an 8-bit grayscale map.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-cost and throughput benchmark.
    Bench {
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Side of the key/value source map.
        #[arg(long, default_value_t = 32)]
        key_side: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, size, out } => {
            let samples = generate_synthetic(seed, count, size)?;
            let plain: Vec<_> = samples.into_iter().map(|s| s.sample).collect();
            write_dataset(&out, &plain)?;
            println!("wrote {} samples of {size}x{size} to {}", plain.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let samples = load_dataset(&cfg.data).with_context(|| format!("loading dataset {}", cfg.data.display()))?;
            let steps = cfg.total_steps(samples.len());
            println!("training on {} samples for {steps} steps", samples.len());
            let outcome = train(&cfg, &samples, Some(&cfg.out), |s| println!("{}", s.line()))?;
            println!(
                "final checkpoint at step {} written to {}",
                outcome.checkpoint.step,
                cfg.out.join("final.ckpt").display()
            );
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (_, model, params) = restore(&ck)?;
            let samples = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let (report, preds) = evaluate(&model, &params, &samples)?;
            let pred_dir = out.join("predictions");
            std::fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
            for (s, p) in samples.iter().zip(&preds) {
                write_pgm(&pred_dir.join(format!("{}.pgm", s.id)), p)?;
            }
            std::fs::write(out.join("metrics.txt"), report.to_key_value())?;
            std::fs::write(out.join("metrics.tsv"), report.to_table())?;
            print!("{}", report.to_key_value());
        }
        Command::Infer { checkpoint, image, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (_, model, params) = restore(&ck)?;
            let (_, secs) = infer(&model, &params, &image, &out)?;
            println!("wrote {}", out.display());
            println!("latency_ms={:.2}", secs * 1e3);
        }
        Command::Bench { config, key_side, reps } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let m = &cfg.model;
            let a = bench_attention(key_side, m.grid_rows, m.dec_dim, m.heads, &m.windows, reps, cfg.train.seed)?;
            println!("key_source={}x{}", a.key_side, a.key_side);
            println!("query_tokens={}", a.query_tokens);
            println!("pooled_tokens={}", a.pooled_tokens);
            println!("full_tokens={}", a.full_tokens);
            println!("pooled_multiplies={}", a.pooled_multiplies);
            println!("full_multiplies={}", a.full_multiplies);
            println!("multiply_reduction_percent={:.2}", a.reduction_percent());
            println!("pooled_ms={:.3}", a.pooled_seconds * 1e3);
            println!("full_ms={:.3}", a.full_seconds * 1e3);
            let ips = bench_throughput(&cfg, reps)?;
            println!("image_size={}", m.image_size);
            println!("images_per_second={ips:.3}");
            println!("parallel={}", mvanet::par::is_parallel());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<mvanet::Error>() {
                Some(mvanet::Error::Config(_) | mvanet::Error::Geometry { .. }) => ExitCode::from(2),
                Some(mvanet::Error::NonFinite { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

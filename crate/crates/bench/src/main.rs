use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use kotrie_bench::{emit_csv, run_experiment, ExperimentConfig, Mix, Pinning, Structure};

/// Timed throughput runs of the concurrent ordered sets.
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
struct Args {
    #[arg(long, value_enum, default_value_t = Structure::Kotrie)]
    structure: Structure,
    /// Universe is `0..2^k`.
    #[arg(long, default_value_t = 20)]
    k: u32,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Length of each timed run.
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    /// Insert:remove:search:predecessor weights.
    #[arg(long, default_value = "1:1:1:1")]
    mix: Mix,
    #[arg(long, value_enum, default_value_t = Pinning::None)]
    pin: Pinning,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    trials: u32,
    /// CSV file to append to.
    #[arg(long, default_value = "resultData.csv")]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let config = ExperimentConfig {
        pin: args.pin,
        seed: args.seed,
        trials: args.trials,
        ..ExperimentConfig::new(args.structure, args.k, args.threads, args.seconds, args.mix)
    };
    let results = run_experiment(&config)?;
    for r in &results {
        println!(
            "{} k={} threads={} mix={} trial {}: {} ops in {:.2?}",
            config.structure, config.k, config.threads, config.mix, r.trial, r.throughput, r.wall
        );
    }
    emit_csv(&results, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

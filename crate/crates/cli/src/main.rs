//! `equilib` command line: dataset generation, training, evaluation,
//! state-space analysis, gradient checking and memory reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "equilib",
    version,
    about = "Constant-memory training of recurrent convolutional cells",
    after_help = "Config files are flat key=value text with [pathfinder], [model] and [train] \
                  sections; unknown keys are rejected. EQUILIB_THREADS caps worker parallelism."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of contour-tracing samples.
    Generate {
        /// Config file; its [pathfinder] section parameterizes the task.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Base seed override; sample i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model per the [model] and [train] sections of a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Mean IoU of a checkpoint at each step of a range.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Step range `A..B` (inclusive) or a comma list.
        #[arg(long)]
        steps: String,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Project hidden states onto their top principal components and
    /// measure per-image drift between steps N and T.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Task-optimized step count the PCA is fit on.
        #[arg(long = "N")]
        n: usize,
        /// Analysis horizon.
        #[arg(long = "T")]
        t: usize,
        #[arg(long, default_value = "analyze_out")]
        out: PathBuf,
        /// Also write a scatter PNG of the projections.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// One of: linear, hgru, lcp.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value = "gradcheck_out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Peak saved-activation bytes per algorithm and step count.
    Memreport {
        /// Comma list of algorithms: bptt, tbptt, rbp, crbp.
        #[arg(long)]
        algorithms: String,
        /// Comma list of step counts.
        #[arg(long)]
        steps: String,
        #[arg(long, default_value = "memreport_out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(threads) = std::env::var("EQUILIB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: EQUILIB_THREADS must be a positive integer");
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate { config, n, out, seed, force } => {
            commands::generate(config.as_deref(), n, &out, seed, force)
        }
        Cmd::Train { config, force } => commands::train(&config, force),
        Cmd::Eval { ckpt, data, steps, out, force } => {
            commands::eval(&ckpt, &data, &steps, &out, force)
        }
        Cmd::Analyze { ckpt, data, n, t, out, png, force } => {
            commands::analyze(&ckpt, &data, n, t, &out, png, force)
        }
        Cmd::Gradcheck { suite, out, force } => commands::gradcheck(&suite, &out, force),
        Cmd::Memreport { algorithms, steps, out, force } => {
            commands::memreport(&algorithms, &steps, &out, force)
        }
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

// rayon is pulled in through equilib-core; re-exported here for the
// thread-pool cap.
use equilib_core::rayon;

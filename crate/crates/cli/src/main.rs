//! `hiremlp` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hiremlp", version, about = "Hire-MLP inference, accounting and invariant checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Config file, or one of the builtin names (tiny, small, base, large).
    #[arg(long, default_value = "small")]
    config: String,
    /// Input resolution used for accounting, as SIZE or HxW.
    #[arg(long, default_value = "224")]
    size: String,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage parameter and FLOP table with budget check.
    Summary(ModelArgs),
    /// Run inference and print the top-k logits.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Weight file written by `save_weights`; random init otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Random NHWC input of shape HxWxC.
        #[arg(long, conflicts_with = "input")]
        random: Option<String>,
        /// Raw tensor file holding a single image tensor.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Run the registered property suites.
    Invariants {
        /// rearrange, hire, network, accounting or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Compare tape gradients with finite differences in f64.
    Gradcheck {
        /// Defaults to a four-stage micro model with two classes.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value = "32x32x3")]
        random: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Measure throughput across thread counts.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Total iterations, the first five are warmup.
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Structural and cost comparison of ablation variants.
    Ablate {
        kind: AblateKind,
        #[command(flatten)]
        model: ModelArgs,
        /// Shift steps per stage for `ablate shift`, e.g. 0,0,0,0.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateKind {
    Padding,
    Manner,
    Shift,
    Fc,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Summary(m) => commands::summary(&m),
        Command::Forward { model, weights, random, input, seed, topk } => {
            commands::forward(&model, weights.as_deref(), random.as_deref(), input.as_deref(), seed, topk)
        }
        Command::Invariants { scope, seeds, seed, json } => commands::invariants(&scope, seeds, seed, json),
        Command::Gradcheck { config, random, samples, seed, json } => {
            commands::gradcheck(config.as_deref(), &random, samples, seed, json)
        }
        Command::Bench { model, batch, iters, threads, seed } => commands::bench(&model, batch, iters, &threads, seed),
        Command::Ablate { kind, model, steps, seed } => match kind {
            AblateKind::Padding => commands::ablate_padding(&model, seed),
            AblateKind::Manner => commands::ablate_manner(&model),
            AblateKind::Shift => commands::ablate_shift(&model, steps.as_deref(), seed),
            AblateKind::Fc => commands::ablate_fc(&model),
        },
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

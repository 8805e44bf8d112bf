//! Thin CLI wrapper around the library's command layer.
//!
//! `matrrec {preprocess|train|evaluate|ablate|sweep|synth} --config <file> [--key value ...]`
//!
//! Every key of the JSON run configuration is mirrored by a flag of the
//! same name; flags override file values. Exit codes: 0 success, 2 input
//! format, 3 training divergence, 4 artifact mismatch, 1 other.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use matrrec::cli::{self, RunConfig};
use matrrec::Result;

#[derive(Parser)]
#[command(name = "matrrec", about = "Hybrid Mamba + Transformer sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, 5-core filter, sequence, split, and cache a dataset
    Preprocess(CommonArgs),
    /// Train a model and write the best checkpoint plus a JSON report
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test part
    Evaluate(CommonArgs),
    /// Train the default model plus one run per ablation variant
    Ablate(CommonArgs),
    /// One train+eval per value along a hyperparameter axis
    Sweep(SweepArgs),
    /// Dependency-horizon comparison of hybrid vs single-component models
    Synth(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,

    /// Axis to sweep: dropout or max_len
    #[arg(long)]
    axis: String,

    /// Values along the axis
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<f64>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long)]
    synthetic_pattern: Option<String>,
    #[arg(long)]
    markov_order: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_mamba_blocks: Option<usize>,
    #[arg(long)]
    d_state: Option<usize>,
    #[arg(long)]
    conv_kernel: Option<usize>,
    #[arg(long)]
    expand: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    add_positional_encoding: Option<bool>,
    #[arg(long)]
    remove_ffn: Option<bool>,
    #[arg(long)]
    remove_residual: Option<bool>,
    #[arg(long)]
    remove_dropout: Option<bool>,
    #[arg(long)]
    mamba_only: Option<bool>,
    #[arg(long)]
    attention_only: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps_adam: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    exclude_seen: Option<bool>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    copy_distances: Option<Vec<usize>>,
    #[arg(long)]
    horizon_seq_len: Option<usize>,
    #[arg(long)]
    horizon_n_items: Option<usize>,
    #[arg(long)]
    horizon_n_users: Option<usize>,
    #[arg(long)]
    horizon_seeds: Option<usize>,
    #[arg(long)]
    horizon_tolerance: Option<f64>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            dataset_name, markov_order, n_items, n_users, seq_len, noise, d_model,
            n_layers, n_heads, n_mamba_blocks, d_state, conv_kernel, expand, dropout,
            max_len, seed, add_positional_encoding, remove_ffn, remove_residual,
            remove_dropout, mamba_only, attention_only, lr, beta1, beta2, eps_adam,
            batch_size, eval_batch_size, max_epochs, patience, exclude_seen,
            horizon_seq_len, horizon_n_items, horizon_n_users, horizon_seeds,
            horizon_tolerance, output_dir, copy_distances,
        );
        if let Some(v) = self.dataset {
            cfg.dataset = Some(v);
        }
        if let Some(v) = self.synthetic_pattern {
            cfg.synthetic_pattern = Some(v);
        }
        if let Some(v) = self.grad_clip {
            cfg.grad_clip = Some(v);
        }
    }
}

fn resolve(config: Option<PathBuf>, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(&path)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            println!("{}", cli::cmd_preprocess(&cfg)?);
        }
        Command::Train(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            let report = cli::cmd_train(&cfg)?;
            println!(
                "trained: best_epoch={} epochs={} stop={:?} seconds={:.1} checkpoint={}",
                report.best_epoch,
                report.epochs.len(),
                report.stopping_reason,
                report.seconds,
                cfg.checkpoint_path().display()
            );
        }
        Command::Evaluate(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            let report = cli::cmd_evaluate(&cfg)?;
            println!("{}", matrrec::eval::MetricsReport::csv_header());
            println!("{}", report.csv_row());
        }
        Command::Ablate(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            print!("{}", cli::cmd_ablate(&cfg)?);
        }
        Command::Sweep(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            print!("{}", cli::cmd_sweep(&cfg, &args.axis, &args.values)?);
        }
        Command::Synth(args) => {
            let cfg = resolve(args.config, args.overrides)?;
            print!("{}", cli::cmd_synth(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}

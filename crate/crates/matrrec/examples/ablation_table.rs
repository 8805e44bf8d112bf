//! Trains the default model plus every ablation variant on a small
//! synthetic corpus and prints the resulting comparison table.
//!
//! Run with: cargo run --release --example ablation_table

use matrrec::cli::{cmd_ablate, RunConfig};

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = RunConfig {
        synthetic_pattern: Some("markov".into()),
        markov_order: 1,
        n_items: 12,
        n_users: 48,
        seq_len: 20,
        d_model: 16,
        n_mamba_blocks: 2,
        d_state: 8,
        conv_kernel: 4,
        dropout: 0.1,
        max_len: 18,
        lr: 3e-3,
        batch_size: 48,
        eval_batch_size: 48,
        max_epochs: 10,
        patience: 10,
        output_dir: dir.path().display().to_string(),
        ..Default::default()
    };
    let csv = cmd_ablate(&cfg).expect("ablation runs");
    print!("{csv}");
}

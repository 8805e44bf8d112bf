//! Runs the full preprocessing pipeline on an interaction TSV: parsing,
//! iterative 5-core filtering, chronological sequencing, and the
//! leave-one-out split. Pass a path to a TSV with header
//! `user_id<TAB>item_id<TAB>timestamp`, or run without arguments to use a
//! small generated file.
//!
//! Run with: cargo run --example preprocess_dataset [-- path/to/data.tsv]

use std::io::Write;
use std::path::PathBuf;

use matrrec::data::{generate_synthetic, leave_one_out_split, parse_interactions, preprocess,
                    SyntheticPattern, SyntheticSpec};

fn main() {
    let arg = std::env::args().nth(1).map(PathBuf::from);
    let _tmp; // keeps the generated file alive until the end
    let path = match arg {
        Some(p) => p,
        None => {
            let spec = SyntheticSpec {
                n_items: 15,
                n_users: 40,
                pattern: SyntheticPattern::Markov { order: 1 },
                seq_len: 12,
                noise: 0.05,
            };
            let records = generate_synthetic(&spec, 3).expect("valid spec");
            let mut f = tempfile::NamedTempFile::new().expect("temp file");
            writeln!(f, "user_id\titem_id\ttimestamp").unwrap();
            for r in &records {
                writeln!(f, "{}\t{}\t{}", r.user, r.item, r.timestamp).unwrap();
            }
            let p = f.path().to_path_buf();
            _tmp = f;
            p
        }
    };

    let records = parse_interactions(&path).expect("parseable TSV");
    println!("parsed {} interactions from {}", records.len(), path.display());
    let ds = preprocess(&records);
    let users = ds.user_vocab.len();
    let items = ds.vocab_size();
    println!(
        "after 5-core filtering: {} users, {} items, {} interactions",
        users, items, ds.n_interactions
    );
    if users > 0 && items > 0 {
        let sparsity = 100.0 * (1.0 - ds.n_interactions as f64 / (users * items) as f64);
        println!("sparsity: {sparsity:.2}%");
    }
    let split = leave_one_out_split(&ds.sequences);
    println!(
        "leave-one-out: {} training sequences, {} validation and {} test targets \
         ({} users skipped for length < 3)",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        split.skipped_short
    );
    let avg: f64 = split.train.iter().map(|s| s.items.len() as f64).sum::<f64>()
        / split.train.len().max(1) as f64;
    println!("mean training-sequence length: {avg:.1}");
}

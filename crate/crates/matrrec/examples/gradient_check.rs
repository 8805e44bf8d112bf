//! Verifies the analytic gradients of a full model against central
//! finite differences at 64-bit precision.
//!
//! Run with: cargo run --example gradient_check

use matrrec::model::{build_model, MaTrRecConfig};
use matrrec::numerics::gradcheck::{finite_difference_grad, max_rel_error};
use matrrec::numerics::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = MaTrRecConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        n_mamba_blocks: 2,
        d_state: 4,
        conv_kernel: 2,
        expand: 2,
        dropout: 0.0,
        max_len: 6,
        vocab_size: 12,
        ablation: Default::default(),
        seed: 1,
    };
    let model = build_model::<f64>(&cfg).expect("valid config");
    let items = [3u32, 7, 1, 9, 4, 11];
    let targets = [7u32, 1, 9, 4, 11, 2];

    let analytic_loss = |record: bool| {
        let tape = if record { Tape::new() } else { Tape::inference() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model.forward(&tape, &items, (1, 6), false, &mut rng).unwrap();
        let loss = tape.cross_entropy(&logits, &targets).unwrap();
        if record {
            model.zero_grad();
            tape.backward(&loss).unwrap();
        }
        loss.item().unwrap()
    };

    let loss = analytic_loss(true);
    println!("loss = {loss:.6}");
    let mut worst = (0.0f64, String::new());
    for (name, p) in model.params() {
        let analytic: Vec<f64> = p.grad().unwrap().clone();
        let numeric = finite_difference_grad(&p, 1e-5, &mut || analytic_loss(false));
        let err = max_rel_error(&analytic, &numeric);
        println!("{name:<28} n={:<5} max rel err = {err:.3e}", p.numel());
        if err > worst.0 {
            worst = (err, name);
        }
    }
    println!("\nworst: {} at {:.3e}", worst.1, worst.0);
    assert!(worst.0 < 1e-4, "gradient check failed");
    println!("all gradients verified below 1e-4 relative error");
}

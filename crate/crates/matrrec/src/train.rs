//! Next-item cross-entropy training with Adam and early stopping on
//! validation NDCG@10.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::MaTrRecModel;
use crate::numerics::{Real, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional global-norm gradient clipping; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 2048,
            eval_batch_size: 4096,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be > 0 when set".into()));
            }
        }
        Ok(())
    }
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct AdamState<R: Real> {
    params: Vec<Tensor<R>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &[(String, Tensor<R>)]) -> AdamState<R> {
        AdamState {
            params: params.iter().map(|(_, p)| p.clone()).collect(),
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update over every registered parameter,
    /// consuming the gradients currently held in their grad buffers.
    pub fn step(&mut self, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let clip_scale = match cfg.grad_clip {
            None => 1.0,
            Some(max_norm) => {
                let mut sq = 0.0;
                for p in &self.params {
                    if let Some(g) = p.grad() {
                        sq += g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
        };
        for (i, p) in self.params.iter().enumerate() {
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|&x| x.to_f64() * clip_scale).collect(),
                None => continue,
            };
            let mut new_data: Vec<R> = p.data().clone();
            for (j, g) in grad.into_iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite gradient in parameter {i}"
                    )));
                }
                self.m[i][j] = cfg.beta1 * self.m[i][j] + (1.0 - cfg.beta1) * g;
                self.v[i][j] = cfg.beta2 * self.v[i][j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let update = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
                new_data[j] = R::from_f64(new_data[j].to_f64() - update);
            }
            p.set_data(&new_data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg_at_10: f64,
    pub valid_recall_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopping_reason: String,
    pub seconds: f64,
    pub config_hash: String,
}

fn snapshot<R: Real>(params: &[(String, Tensor<R>)]) -> Vec<Vec<R>> {
    params.iter().map(|(_, p)| p.data().clone()).collect()
}

fn restore<R: Real>(params: &[(String, Tensor<R>)], snap: &[Vec<R>]) -> Result<()> {
    for ((_, p), s) in params.iter().zip(snap) {
        p.set_data(s)?;
    }
    Ok(())
}

/// Trains in place. Per epoch: shuffle, batch, forward, loss, backward,
/// Adam step; then score validation NDCG@10. Stops after `patience`
/// epochs without improvement and restores the best parameters.
pub fn fit<R: Real>(
    model: &MaTrRecModel<R>,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let start = Instant::now();
    let params = model.params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        stopping_reason: "max_epochs reached".into(),
        seconds: 0.0,
        config_hash: model.config.hash(),
    };
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Vec<R>>> = None;
    for epoch in 1..=cfg.max_epochs {
        let batches = data::make_batches(
            &split.train,
            model.config.max_len,
            cfg.batch_size,
            Some(&mut rng),
        )?;
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in &batches {
            let tape = Tape::new();
            let logits = model.forward(
                &tape,
                &batch.items,
                (batch.batch_size, batch.max_len),
                true,
                &mut rng,
            )?;
            let loss = tape.cross_entropy(&logits, &batch.targets)?;
            let loss_val = loss.item()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            model.zero_grad();
            tape.backward(&loss)?;
            adam.step(cfg)?;
            loss_sum += loss_val;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let ranks = eval::full_rank(model, &split.valid, true, cfg.eval_batch_size)?;
        let ndcg = eval::ndcg_at_k(&ranks, 10)?;
        let recall = eval::recall_at_k(&ranks, 10)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            valid_ndcg_at_10: ndcg,
            valid_recall_at_10: recall,
        });
        if ndcg > best_metric {
            best_metric = ndcg;
            report.best_epoch = epoch;
            best_params = Some(snapshot(&params));
        } else if epoch - report.best_epoch >= cfg.patience {
            report.stopping_reason =
                format!("no validation improvement for {} epochs", cfg.patience);
            break;
        }
    }
    if let Some(best) = best_params {
        restore(&params, &best)?;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains until the mean epoch loss drops below `target_loss`, skipping
/// validation entirely. Used by the memorization experiments.
pub fn fit_to_loss<R: Real>(
    model: &MaTrRecModel<R>,
    train: &[data::UserSequence],
    cfg: &TrainConfig,
    target_loss: f64,
) -> Result<(f64, usize)> {
    cfg.validate()?;
    let params = model.params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_loss = f64::INFINITY;
    for epoch in 1..=cfg.max_epochs {
        let batches =
            data::make_batches(train, model.config.max_len, cfg.batch_size, Some(&mut rng))?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let tape = Tape::new();
            let logits = model.forward(
                &tape,
                &batch.items,
                (batch.batch_size, batch.max_len),
                true,
                &mut rng,
            )?;
            let loss = tape.cross_entropy(&logits, &batch.targets)?;
            let loss_val = loss.item()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            model.zero_grad();
            tape.backward(&loss)?;
            adam.step(cfg)?;
            loss_sum += loss_val;
        }
        last_loss = loss_sum / batches.len() as f64;
        if last_loss < target_loss {
            return Ok((last_loss, epoch));
        }
    }
    Ok((last_loss, cfg.max_epochs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, leave_one_out_split, preprocess, SyntheticPattern,
                      SyntheticSpec};
    use crate::model::{build_model, MaTrRecConfig};
    use rand::Rng;

    fn tiny_config(vocab: usize) -> MaTrRecConfig {
        MaTrRecConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            n_mamba_blocks: 1,
            d_state: 4,
            conv_kernel: 2,
            expand: 2,
            dropout: 0.0,
            max_len: 8,
            vocab_size: vocab,
            ablation: Default::default(),
            seed: 5,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let model = build_model::<f64>(&tiny_config(6)).unwrap();
        let params = model.params();
        model.zero_grad();
        let before = snapshot(&params);
        let mut adam = AdamState::new(&params);
        adam.step(&TrainConfig::default()).unwrap();
        let after = snapshot(&params);
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .requires_grad();
        let params = vec![("p".to_string(), p.clone())];
        // plant a gradient by hand through a trivial graph
        let tape = Tape::new();
        let w = Tensor::from_vec(&[3], vec![3.0, -7.0, 0.0]).unwrap();
        let prod = tape.mul(&p, &w).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        tape.backward(&loss).unwrap();
        let mut adam = AdamState::new(&params);
        let cfg = TrainConfig { lr: 0.01, ..Default::default() };
        adam.step(&cfg).unwrap();
        let after = p.to_vec();
        // bias-corrected first step: update = lr * g/(|g| + eps) ~ lr*sign(g)
        assert!((after[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((after[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!((after[2] - 0.5).abs() < 1e-12, "zero grad entry untouched");
    }

    fn cyclic_split(seed: u64) -> (crate::data::Dataset, Split) {
        let spec = SyntheticSpec {
            n_items: 6,
            n_users: 12,
            pattern: SyntheticPattern::Cyclic,
            seq_len: 10,
            noise: 0.0,
        };
        let ds = preprocess(&generate_synthetic(&spec, seed).unwrap());
        let split = leave_one_out_split(&ds.sequences);
        (ds, split)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, split) = cyclic_split(0);
        let model = build_model::<f64>(&tiny_config(ds.vocab_size())).unwrap();
        let before = snapshot(&model.params());
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let report = fit(&model, &split, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, 0);
        assert_eq!(before, snapshot(&model.params()));
    }

    #[test]
    fn fresh_model_loss_is_near_log_vocab() {
        let (ds, split) = cyclic_split(1);
        let v = ds.vocab_size();
        let model = build_model::<f64>(&tiny_config(v)).unwrap();
        let batch = &data::make_batches(&split.train, 8, 64, None).unwrap()[0];
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model
            .forward(&tape, &batch.items, (batch.batch_size, batch.max_len), false, &mut rng)
            .unwrap();
        let loss = tape.cross_entropy(&logits, &batch.targets).unwrap().item().unwrap();
        let lnv = (v as f64).ln();
        assert!(
            (loss - lnv).abs() / lnv < 0.05,
            "initial loss {loss} vs ln|V| {lnv}"
        );
    }

    #[test]
    fn single_step_decreases_loss_on_frozen_batch() {
        for seed in 0..10u64 {
            let (ds, split) = cyclic_split(seed);
            let mut mc = tiny_config(ds.vocab_size());
            mc.seed = seed;
            let model = build_model::<f64>(&mc).unwrap();
            let batch = &data::make_batches(&split.train, 8, 64, None).unwrap()[0];
            let loss_of = |model: &MaTrRecModel<f64>, record: bool| {
                let tape = if record { Tape::new() } else { Tape::inference() };
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let logits = model
                    .forward(
                        &tape,
                        &batch.items,
                        (batch.batch_size, batch.max_len),
                        false,
                        &mut rng,
                    )
                    .unwrap();
                let loss = tape.cross_entropy(&logits, &batch.targets).unwrap();
                if record {
                    model.zero_grad();
                    tape.backward(&loss).unwrap();
                }
                loss.item().unwrap()
            };
            let before = loss_of(&model, true);
            let mut adam = AdamState::new(&model.params());
            let cfg = TrainConfig { lr: 1e-4, ..Default::default() };
            adam.step(&cfg).unwrap();
            let after = loss_of(&model, false);
            assert!(after < before, "seed {seed}: {after} !< {before}");
        }
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let run = || {
            let (ds, split) = cyclic_split(3);
            let model = build_model::<f64>(&tiny_config(ds.vocab_size())).unwrap();
            let cfg = TrainConfig {
                max_epochs: 3,
                batch_size: 8,
                eval_batch_size: 8,
                ..Default::default()
            };
            let report = fit(&model, &split, &cfg).unwrap();
            (snapshot(&model.params()), report.epochs)
        };
        let (p1, e1) = run();
        let (p2, e2) = run();
        let bits = |p: &Vec<Vec<f64>>| -> Vec<u64> {
            p.iter().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&p1), bits(&p2));
        for (a, b) in e1.iter().zip(&e2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.valid_ndcg_at_10.to_bits(), b.valid_ndcg_at_10.to_bits());
        }
    }

    #[test]
    fn patience_stops_after_flat_validation() {
        // lr = 0 freezes the model, so validation NDCG is constant:
        // best is epoch 1 and training must stop after 1 + patience epochs
        let (ds, split) = cyclic_split(4);
        let model = build_model::<f64>(&tiny_config(ds.vocab_size())).unwrap();
        let cfg = TrainConfig {
            lr: 1e-30, // effectively frozen but still valid
            max_epochs: 50,
            patience: 3,
            batch_size: 16,
            eval_batch_size: 16,
            ..Default::default()
        };
        let report = fit(&model, &split, &cfg).unwrap();
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.epochs.len(), 1 + 3);
        assert!(report.stopping_reason.contains("no validation improvement"));
    }

    #[test]
    fn best_params_are_restored() {
        let (ds, split) = cyclic_split(6);
        let model = build_model::<f64>(&tiny_config(ds.vocab_size())).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            eval_batch_size: 16,
            ..Default::default()
        };
        let report = fit(&model, &split, &cfg).unwrap();
        // re-evaluating after fit must reproduce the best epoch's metric
        let ranks = eval::full_rank(&model, &split.valid, true, 16).unwrap();
        let ndcg = eval::ndcg_at_k(&ranks, 10).unwrap();
        let best = &report.epochs[report.best_epoch - 1];
        assert_eq!(ndcg.to_bits(), best.valid_ndcg_at_10.to_bits());
    }

    #[test]
    fn overfits_fixed_random_sequences() {
        // 32 fixed random sequences; a couple hundred steps should push
        // training loss below 0.1
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let train: Vec<data::UserSequence> = (0..32)
            .map(|u| data::UserSequence {
                user_index: u,
                items: (0..8).map(|_| rng.gen_range(1..=40u32)).collect(),
            })
            .collect();
        let mut mc = tiny_config(40);
        mc.d_model = 16;
        mc.d_state = 8;
        let model = build_model::<f64>(&mc).unwrap();
        let cfg = TrainConfig {
            lr: 5e-3,
            max_epochs: 200,
            batch_size: 32,
            ..Default::default()
        };
        let (loss, epochs) = fit_to_loss(&model, &train, &cfg, 0.1).unwrap();
        assert!(loss < 0.1, "loss {loss} after {epochs} epochs");
    }

    #[test]
    fn invalid_train_configs_rejected() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.grad_clip = Some(-1.0);
        assert!(c.validate().is_err());
    }
}

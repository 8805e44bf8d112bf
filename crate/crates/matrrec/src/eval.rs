//! Full-catalog ranking under the leave-one-out protocol, and the two
//! ranking metrics: Recall@K and NDCG@K with a single relevant item.

use std::collections::HashSet;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, EvalInstance};
use crate::error::{Error, Result};
use crate::model::MaTrRecModel;
use crate::numerics::{Real, Tape};

/// Computes the 1-based rank of `target` among eligible items given raw
/// scores indexed `scores[i] = score of item i+1`. Items in `excluded`
/// are ineligible; ties break toward the smaller item index.
pub fn rank_of_target(
    scores: &[f64],
    target: u32,
    excluded: &HashSet<u32>,
) -> Result<usize> {
    if target == 0 || target as usize > scores.len() {
        return Err(Error::Contract(format!(
            "target {target} outside catalog 1..={}",
            scores.len()
        )));
    }
    if excluded.contains(&target) {
        return Err(Error::Contract(format!(
            "target {target} is excluded from ranking"
        )));
    }
    let ts = scores[target as usize - 1];
    let mut rank = 1usize;
    for (i, &s) in scores.iter().enumerate() {
        let item = i as u32 + 1;
        if item == target || excluded.contains(&item) {
            continue;
        }
        if s > ts || (s == ts && item < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Scores all items from each instance's last real position and returns
/// per-user target ranks. When `exclusion` is on (the default), items
/// already in the user's prefix are ineligible.
pub fn full_rank<R: Real>(
    model: &MaTrRecModel<R>,
    instances: &[EvalInstance],
    exclusion: bool,
    eval_batch_size: usize,
) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::Contract("no evaluation instances".into()));
    }
    if eval_batch_size == 0 {
        return Err(Error::Config("eval_batch_size must be positive".into()));
    }
    let n = model.config.max_len;
    let v = model.config.vocab_size;
    let mut ranks = Vec::with_capacity(instances.len());
    // dropout is inactive at evaluation time, so this rng is never used
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let _: &mut ChaCha8Rng = &mut rng;
    for chunk in instances.chunks(eval_batch_size) {
        let (items, lengths) = data::pad_eval_rows(chunk, n);
        let b = chunk.len();
        let tape = Tape::inference();
        let logits = model.forward(&tape, &items, (b, n), false, &mut rng)?;
        let flat = logits.to_vec();
        for (row, inst) in chunk.iter().enumerate() {
            let last = lengths[row]
                .checked_sub(1)
                .ok_or_else(|| Error::Contract("empty evaluation prefix".into()))?;
            let offset = (row * n + last) * v;
            let scores: Vec<f64> =
                flat[offset..offset + v].iter().map(|s| s.to_f64()).collect();
            let excluded: HashSet<u32> = if exclusion {
                inst.prefix.iter().copied().filter(|&i| i != inst.target).collect()
            } else {
                HashSet::new()
            };
            ranks.push(rank_of_target(&scores, inst.target, &excluded)?);
        }
    }
    Ok(ranks)
}

/// Fraction of users whose target ranked within the top K.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("recall over empty results".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean discounted gain: rank r within K contributes 1/log2(r+1), the
/// ideal gain is 1 (single relevant item at rank 1).
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("ndcg over empty results".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r as f64 + 1.0).log2())
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

/// Ranking metrics with run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub ndcg_at_10: f64,
    pub seconds: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "dataset,config_hash,seed,recall@5,recall@10,recall@20,ndcg@10,seconds"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.dataset,
            self.config_hash,
            self.seed,
            self.recall_at_5,
            self.recall_at_10,
            self.recall_at_20,
            self.ndcg_at_10,
            self.seconds
        )
    }
}

/// Ranks every instance and assembles the standard report.
pub fn evaluate<R: Real>(
    model: &MaTrRecModel<R>,
    instances: &[EvalInstance],
    exclusion: bool,
    eval_batch_size: usize,
    dataset: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let ranks = full_rank(model, instances, exclusion, eval_batch_size)?;
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        config_hash: model.config.hash(),
        seed,
        n_users: ranks.len(),
        recall_at_5: recall_at_k(&ranks, 5)?,
        recall_at_10: recall_at_k(&ranks, 10)?,
        recall_at_20: recall_at_k(&ranks, 20)?,
        ndcg_at_10: ndcg_at_k(&ranks, 10)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, MaTrRecConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn unique_maximum_gets_rank_one() {
        let scores = [0.1, 0.9, 0.3];
        assert_eq!(rank_of_target(&scores, 2, &HashSet::new()).unwrap(), 1);
    }

    #[test]
    fn hand_rank_case() {
        let scores = [0.2, 0.9, 0.5];
        assert_eq!(rank_of_target(&scores, 3, &HashSet::new()).unwrap(), 2);
    }

    #[test]
    fn exclusion_improves_rank_by_one() {
        let scores = [0.2, 0.9, 0.5];
        let without = rank_of_target(&scores, 3, &HashSet::new()).unwrap();
        let with = rank_of_target(&scores, 3, &HashSet::from([2u32])).unwrap();
        assert_eq!(without - with, 1);
    }

    #[test]
    fn ties_break_toward_smaller_index() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(rank_of_target(&scores, 1, &HashSet::new()).unwrap(), 1);
        assert_eq!(rank_of_target(&scores, 2, &HashSet::new()).unwrap(), 2);
        assert_eq!(rank_of_target(&scores, 3, &HashSet::new()).unwrap(), 3);
    }

    #[test]
    fn excluded_target_is_a_contract_error() {
        let scores = [0.2, 0.9];
        assert!(rank_of_target(&scores, 2, &HashSet::from([2u32])).is_err());
        assert!(rank_of_target(&scores, 0, &HashSet::new()).is_err());
        assert!(rank_of_target(&scores, 3, &HashSet::new()).is_err());
    }

    #[test]
    fn recall_spot_values() {
        assert_eq!(recall_at_k(&[1, 2, 3], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 15], 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[7, 3, 9], 100).unwrap(), 1.0);
        assert!(recall_at_k(&[], 10).is_err());
    }

    #[test]
    fn ndcg_spot_values() {
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        assert!((ndcg_at_k(&[3], 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[11], 10).unwrap(), 0.0);
        assert!(ndcg_at_k(&[], 10).is_err());
    }

    /// Brute-force oracle: sort eligible items by (score desc, index asc),
    /// find the target's position, then compute metrics by definition.
    fn brute_force(scores: &[f64], target: u32, k: usize) -> (f64, f64) {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        let pos = order.iter().position(|&i| i as u32 + 1 == target).unwrap();
        let rank = pos + 1;
        let recall = if rank <= k { 1.0 } else { 0.0 };
        let ndcg = if rank <= k {
            1.0 / ((rank as f64 + 1.0).log2())
        } else {
            0.0
        };
        (recall, ndcg)
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n_users = rng.gen_range(1..=20);
            let n_items = rng.gen_range(2..=50);
            let k = rng.gen_range(1..=n_items);
            let mut ranks = Vec::new();
            let mut recall_sum = 0.0;
            let mut ndcg_sum = 0.0;
            for _ in 0..n_users {
                let scores: Vec<f64> =
                    (0..n_items).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
                let target = rng.gen_range(1..=n_items as u32);
                ranks.push(rank_of_target(&scores, target, &HashSet::new()).unwrap());
                let (r, n) = brute_force(&scores, target, k);
                recall_sum += r;
                ndcg_sum += n;
            }
            let u = n_users as f64;
            assert_eq!(recall_at_k(&ranks, k).unwrap(), recall_sum / u);
            assert!((ndcg_at_k(&ranks, k).unwrap() - ndcg_sum / u).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_invariant_under_monotone_transform() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let mapped: Vec<f64> = scores.iter().map(|&s| (0.7 * s).exp() + 3.0).collect();
            let target = rng.gen_range(1..=30u32);
            assert_eq!(
                rank_of_target(&scores, target, &HashSet::new()).unwrap(),
                rank_of_target(&mapped, target, &HashSet::new()).unwrap()
            );
        }
    }

    #[test]
    fn hit_rate_equals_recall_under_single_relevant_item() {
        let ranks = [1usize, 4, 12, 7, 30, 2];
        for k in [1, 5, 10, 20] {
            let hr = ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
            assert_eq!(hr.to_bits(), recall_at_k(&ranks, k).unwrap().to_bits());
        }
    }

    fn tiny_model() -> MaTrRecModel<f64> {
        let cfg = MaTrRecConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            n_mamba_blocks: 1,
            d_state: 4,
            conv_kernel: 2,
            expand: 2,
            dropout: 0.0,
            max_len: 6,
            vocab_size: 15,
            ablation: Default::default(),
            seed: 3,
        };
        build_model(&cfg).unwrap()
    }

    #[test]
    fn evaluate_report_is_monotone_and_deterministic() {
        let model = tiny_model();
        let instances: Vec<EvalInstance> = (0..8)
            .map(|u| EvalInstance {
                user_index: u,
                prefix: vec![(u as u32 % 14) + 1, ((u as u32 + 3) % 14) + 1],
                target: ((u as u32 + 7) % 14) + 1,
            })
            .collect();
        let a = evaluate(&model, &instances, true, 3, "toy", 0).unwrap();
        let b = evaluate(&model, &instances, true, 3, "toy", 0).unwrap();
        assert!(a.recall_at_5 <= a.recall_at_10 && a.recall_at_10 <= a.recall_at_20);
        assert_eq!(a.recall_at_10.to_bits(), b.recall_at_10.to_bits());
        assert_eq!(a.ndcg_at_10.to_bits(), b.ndcg_at_10.to_bits());
        assert_eq!(a.n_users, 8);
        assert!(a.csv_row().starts_with("toy,"));
    }

    #[test]
    fn untrained_model_ranks_near_random() {
        // with |V|=15 items and fresh weights, mean recall@5 over many
        // users should hover near 5/15; accept a generous band
        let model = tiny_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let instances: Vec<EvalInstance> = (0..300)
            .map(|u| EvalInstance {
                user_index: u,
                prefix: (0..4).map(|_| rng.gen_range(1..=15u32)).collect(),
                target: rng.gen_range(1..=15u32),
            })
            .collect();
        let ranks = full_rank(&model, &instances, false, 64).unwrap();
        let r5 = recall_at_k(&ranks, 5).unwrap();
        assert!((r5 - 5.0 / 15.0).abs() < 0.15, "recall@5 = {r5}");
    }

    #[test]
    fn batching_does_not_change_ranks() {
        let model = tiny_model();
        let instances: Vec<EvalInstance> = (0..9)
            .map(|u| EvalInstance {
                user_index: u,
                prefix: vec![(u as u32 % 14) + 1],
                target: ((u as u32 + 5) % 14) + 1,
            })
            .collect();
        let a = full_rank(&model, &instances, true, 2).unwrap();
        let b = full_rank(&model, &instances, true, 9).unwrap();
        assert_eq!(a, b);
    }
}

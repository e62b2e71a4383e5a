//! Full-catalog ranking metrics: HR@k and NDCG@k for k in {5, 10, 20}.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, SplitDataset};
use crate::encoders::IdBatch;
use crate::error::{Error, Result};
use crate::model::SeqModel;
use crate::tensor::{ParamStore, Real, Tensor};

pub const CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    pub user: usize,
    pub target: usize,
    pub rank: usize,
}

/// 1-based rank of `target` among real items `1..=num_items` that are not in
/// `exclusions` (the target itself is never excluded). Ties count against
/// the target.
pub fn rank_from_scores<T: Real>(scores: &[T], num_items: usize, target: usize, exclusions: &[usize]) -> Result<usize> {
    if target == 0 || target > num_items || scores.len() < num_items + 1 {
        return Err(Error::IdOutOfRange {
            id: target,
            rows: num_items + 1,
        });
    }
    let excluded: HashSet<usize> = exclusions.iter().copied().filter(|&v| v != target).collect();
    let st = scores[target];
    let above = (1..=num_items)
        .filter(|&c| c != target && !excluded.contains(&c) && !(scores[c] < st))
        .count();
    Ok(1 + above)
}

/// Rank `target` by dot product of `z` with every row of `table`
/// (`[num_items + 2, d]`, row 0 pad, last row mask).
pub fn rank_target<T: Real>(z: &[T], table: &Tensor<T>, target: usize, exclusions: &[usize]) -> Result<usize> {
    let d = table.last_dim();
    if z.len() != d || table.shape().len() != 2 || table.shape()[0] < 3 {
        return Err(Error::shape("rank_target", format!("z has {} dims, table {:?}", z.len(), table.shape())));
    }
    let rows = table.shape()[0];
    let scores: Vec<T> = (0..rows)
        .map(|r| table.row(r).iter().zip(z).map(|(&a, &b)| a * b).sum())
        .collect();
    rank_from_scores(&scores, rows - 2, target, exclusions)
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be at least 1".into()));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let total = ranks
        .iter()
        .filter(|&&r| r <= k)
        .fold(0.0, |acc, &r| acc + 1.0 / ((r + 1) as f64).log2());
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr5: f64,
    pub hr10: f64,
    pub hr20: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            hr5: hr_at_k(ranks, 5)?,
            hr10: hr_at_k(ranks, 10)?,
            hr20: hr_at_k(ranks, 20)?,
            ndcg5: ndcg_at_k(ranks, 5)?,
            ndcg10: ndcg_at_k(ranks, 10)?,
            ndcg20: ndcg_at_k(ranks, 20)?,
        })
    }

    /// Values in table order: HR@5, HR@10, HR@20, NDCG@5, NDCG@10, NDCG@20.
    pub fn as_row(&self) -> [f64; 6] {
        [self.hr5, self.hr10, self.hr20, self.ndcg5, self.ndcg10, self.ndcg20]
    }

    pub const HEADER: [&'static str; 6] = ["HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10", "NDCG@20"];

    pub fn mean(all: &[Metrics]) -> Result<Metrics> {
        if all.is_empty() {
            return Err(Error::Empty("metrics to average"));
        }
        let n = all.len() as f64;
        let mut acc = [0.0; 6];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.as_row()) {
                *a += v;
            }
        }
        let [hr5, hr10, hr20, ndcg5, ndcg10, ndcg20] = acc.map(|a| a / n);
        Ok(Metrics { hr5, hr10, hr20, ndcg5, ndcg10, ndcg20 })
    }
}

/// Rank every user's `split` target from an eval-mode forward over its
/// context. Inference uses the model alone; no complement is added.
pub fn rank_users<T: Real>(
    model: &SeqModel,
    store: &ParamStore<T>,
    ds: &SplitDataset,
    split: Split,
    batch_size: usize,
) -> Result<Vec<RankResult>> {
    let maxlen = model.config().encoder.maxlen;
    let num_items = ds.num_items();
    let users: Vec<usize> = (0..ds.num_users()).collect();
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(batch_size.max(1)) {
        let contexts: Vec<&[usize]> = chunk.iter().map(|&u| ds.context(u, split).0).collect();
        let batch = IdBatch::new(&contexts, maxlen);
        let z = model.embed(store, &batch)?;
        let scores = model.score_all(store, &z);
        let width = scores.last_dim();
        for (i, &u) in chunk.iter().enumerate() {
            let (ctx, target) = ds.context(u, split);
            let rank = rank_from_scores(&scores.values()[i * width..(i + 1) * width], num_items, target, ctx)?;
            out.push(RankResult { user: u, target, rank });
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &SeqModel, store: &ParamStore<T>, ds: &SplitDataset, split: Split, batch_size: usize) -> Result<Metrics> {
    let ranks: Vec<usize> = rank_users(model, store, ds, split, batch_size)?.into_iter().map(|r| r.rank).collect();
    Metrics::from_ranks(&ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn closed_form_contributions() {
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3], 10).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[6], 5).unwrap(), 0.0);
        assert_eq!(hr_at_k(&[6], 5).unwrap(), 0.0);
        assert!(hr_at_k(&[], 5).is_err());
        assert!(ndcg_at_k(&[1], 0).is_err());
        let perfect = Metrics::from_ranks(&[1, 1, 1]).unwrap();
        assert_eq!(perfect.as_row(), [1.0; 6]);
    }

    #[test]
    fn rank_examples() {
        let scores = [0.0f64, 0.1, 0.9, 0.3];
        assert_eq!(rank_from_scores(&scores, 3, 2, &[]).unwrap(), 1);
        let flat = [0.0f64; 12];
        assert_eq!(rank_from_scores(&flat, 10, 4, &[]).unwrap(), 10);
        assert_eq!(rank_from_scores(&scores, 3, 1, &[2]).unwrap(), 2);
        assert_eq!(rank_from_scores(&scores, 3, 1, &[1, 2, 3]).unwrap(), 1);
        assert!(rank_from_scores(&scores, 3, 0, &[]).is_err());
        assert!(rank_from_scores(&scores, 3, 4, &[]).is_err());
    }

    #[test]
    fn rank_target_uses_dot_products() {
        let table = Tensor::new(vec![5, 2], vec![9.0f64, 9.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 9.0, 9.0]).unwrap();
        assert_eq!(rank_target(&[1.0, 0.0], &table, 3, &[]).unwrap(), 1);
        assert_eq!(rank_target(&[0.0, 1.0], &table, 2, &[]).unwrap(), 2);
        assert_eq!(rank_target(&[0.0, 1.0], &table, 2, &[3]).unwrap(), 1);
    }

    /// Sort all eligible candidates by score, target placed after every tie.
    fn sort_oracle(scores: &[f64], num_items: usize, target: usize, excl: &[usize]) -> usize {
        let mut cands: Vec<(f64, bool)> = (1..=num_items)
            .filter(|c| *c == target || !excl.contains(c))
            .map(|c| (scores[c], c == target))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.iter().position(|c| c.1).unwrap() + 1
    }

    #[test]
    fn rank_matches_full_sort_on_tiny_instances() {
        let mut rng = RngStream::new(11, "rank-oracle");
        for _ in 0..200 {
            let n = rng.random_range(1..12);
            // coarse scores so ties are common
            let scores: Vec<f64> = (0..n + 2).map(|_| rng.random_range(0..4) as f64).collect();
            let target = rng.random_range(1..=n);
            let excl: Vec<usize> = (1..=n).filter(|_| rng.random_bool(0.3)).collect();
            assert_eq!(
                rank_from_scores(&scores, n, target, &excl).unwrap(),
                sort_oracle(&scores, n, target, &excl)
            );
        }
    }

    proptest! {
        #[test]
        fn affine_invariance(scores in prop::collection::vec(-5.0f64..5.0, 12), a in 0.1f64..10.0, b in -3.0f64..3.0, target in 1usize..=10) {
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let r1 = rank_from_scores(&scores, 10, target, &[1, 2]).unwrap();
            let r2 = rank_from_scores(&moved, 10, target, &[1, 2]).unwrap();
            prop_assert_eq!(r1, r2);
        }

        #[test]
        fn metrics_ordering(ranks in prop::collection::vec(1usize..40, 1..50)) {
            let m = Metrics::from_ranks(&ranks).unwrap();
            prop_assert!(m.hr5 <= m.hr10 && m.hr10 <= m.hr20 && m.hr20 <= 1.0);
            prop_assert!(m.ndcg5 <= m.ndcg10 && m.ndcg10 <= m.ndcg20);
            prop_assert!(m.ndcg5 <= m.hr5 && m.ndcg10 <= m.hr10 && m.ndcg20 <= m.hr20);
        }
    }
}

//! Sequence-level augmentations used to build contrastive views: crop, mask,
//! reorder, and the correlation-driven substitute and insert.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Correlates kept per item; substitute and insert draw uniformly from them.
pub const TOP_CORRELATES: usize = 5;
pub const CORRELATION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugOp {
    Crop,
    Mask,
    Reorder,
    Substitute,
    Insert,
}

impl AugOp {
    pub const ALL: [AugOp; 5] = [AugOp::Crop, AugOp::Mask, AugOp::Reorder, AugOp::Substitute, AugOp::Insert];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Crop => "crop",
            AugOp::Mask => "mask",
            AugOp::Reorder => "reorder",
            AugOp::Substitute => "substitute",
            AugOp::Insert => "insert",
        }
    }

    fn needs_correlation(self) -> bool {
        matches!(self, AugOp::Substitute | AugOp::Insert)
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// When false the trainer feeds the raw sequence to both branches.
    pub enabled: bool,
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
    pub substitute_ratio: f64,
    pub insert_ratio: f64,
    pub ops: Vec<AugOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.2,
            substitute_ratio: 0.1,
            insert_ratio: 0.1,
            ops: vec![AugOp::Crop, AugOp::Mask, AugOp::Reorder],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} out of range")))
            }
        };
        check("crop_ratio", self.crop_ratio, self.crop_ratio > 0.0 && self.crop_ratio <= 1.0)?;
        check("mask_ratio", self.mask_ratio, (0.0..1.0).contains(&self.mask_ratio))?;
        check("reorder_ratio", self.reorder_ratio, self.reorder_ratio > 0.0 && self.reorder_ratio <= 1.0)?;
        check("substitute_ratio", self.substitute_ratio, (0.0..1.0).contains(&self.substitute_ratio))?;
        check("insert_ratio", self.insert_ratio, (0.0..1.0).contains(&self.insert_ratio))?;
        if self.enabled && self.ops.is_empty() {
            return Err(Error::InvalidArgument("augmentation enabled with no operations".into()));
        }
        Ok(())
    }

    pub fn needs_correlation(&self) -> bool {
        self.enabled && self.ops.iter().any(|op| op.needs_correlation())
    }
}

/// Windowed co-occurrence correlates per item, normalized per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCorrelation {
    num_items: usize,
    /// `top[v]` for item `v` (index 0 unused), best first.
    top: Vec<Vec<(usize, f64)>>,
}

impl ItemCorrelation {
    /// Count co-occurrences of distinct items at most [`CORRELATION_WINDOW`]
    /// positions apart. Pass the training prefixes only.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [usize]>, num_items: usize) -> Self {
        let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); num_items + 1];
        for seq in sequences {
            for (i, &a) in seq.iter().enumerate() {
                for &b in seq.iter().skip(i + 1).take(CORRELATION_WINDOW) {
                    if a == b || a == 0 || b == 0 || a > num_items || b > num_items {
                        continue;
                    }
                    *counts[a].entry(b).or_default() += 1.0;
                    *counts[b].entry(a).or_default() += 1.0;
                }
            }
        }
        let top = counts
            .into_iter()
            .map(|row| {
                let total: f64 = row.values().sum();
                let mut ranked: Vec<(usize, f64)> = row.into_iter().map(|(v, c)| (v, c / total)).collect();
                ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                ranked.truncate(TOP_CORRELATES);
                ranked
            })
            .collect();
        Self { num_items, top }
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Ranked correlates of `item`, best first; empty for unseen items.
    pub fn correlates(&self, item: usize) -> &[(usize, f64)] {
        self.top.get(item).map(Vec::as_slice).unwrap_or(&[])
    }

    /// A uniformly chosen top correlate, or a uniformly random real item when
    /// `item` has none (the mask token, say).
    pub fn draw<R: Rng + ?Sized>(&self, item: usize, rng: &mut R) -> usize {
        let c = self.correlates(item);
        if c.is_empty() {
            rng.random_range(1..=self.num_items)
        } else {
            c[rng.random_range(0..c.len())].0
        }
    }
}

// Ratios times lengths land on integers often enough that plain floor/ceil
// would flip on representation error (0.6 * 5, say).
fn floor_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

fn ceil_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Contiguous window of `max(1, ⌈η·|s|⌉)` items at a uniform start.
pub fn crop<R: Rng + ?Sized>(s: &[usize], eta: f64, rng: &mut R) -> Vec<usize> {
    if s.is_empty() {
        return Vec::new();
    }
    let len = ceil_count(eta, s.len()).clamp(1, s.len());
    let start = rng.random_range(0..=s.len() - len);
    s[start..start + len].to_vec()
}

/// Replace `⌊ratio·|s|⌋` distinct positions with `mask_id`.
pub fn mask<R: Rng + ?Sized>(s: &[usize], ratio: f64, mask_id: usize, rng: &mut R) -> Vec<usize> {
    let k = floor_count(ratio, s.len()).min(s.len());
    let mut out = s.to_vec();
    for i in index::sample(rng, s.len(), k) {
        out[i] = mask_id;
    }
    out
}

/// Shuffle one contiguous segment of `⌊ratio·|s|⌋` items in place.
pub fn reorder<R: Rng + ?Sized>(s: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let len = floor_count(ratio, s.len()).min(s.len());
    let mut out = s.to_vec();
    if len <= 1 {
        return out;
    }
    let start = rng.random_range(0..=s.len() - len);
    out[start..start + len].shuffle(rng);
    out
}

/// Replace `⌊ratio·|s|⌋` positions with a correlate of the item there.
pub fn substitute<R: Rng + ?Sized>(s: &[usize], ratio: f64, corr: &ItemCorrelation, rng: &mut R) -> Vec<usize> {
    let k = floor_count(ratio, s.len()).min(s.len());
    let mut out = s.to_vec();
    let mut picked = index::sample(rng, s.len(), k).into_vec();
    picked.sort_unstable();
    for i in picked {
        out[i] = corr.draw(s[i], rng);
    }
    out
}

/// After each of `⌊ratio·|s|⌋` chosen positions, insert a correlate of the
/// item there.
pub fn insert<R: Rng + ?Sized>(s: &[usize], ratio: f64, corr: &ItemCorrelation, rng: &mut R) -> Vec<usize> {
    let k = floor_count(ratio, s.len()).min(s.len());
    let mut chosen = vec![false; s.len()];
    for i in index::sample(rng, s.len(), k) {
        chosen[i] = true;
    }
    let mut out = Vec::with_capacity(s.len() + k);
    for (&v, &c) in s.iter().zip(&chosen) {
        out.push(v);
        if c {
            out.push(corr.draw(v, rng));
        }
    }
    out
}

pub fn apply<R: Rng + ?Sized>(
    op: AugOp,
    s: &[usize],
    cfg: &AugmentConfig,
    mask_id: usize,
    corr: Option<&ItemCorrelation>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let need_corr = || corr.ok_or_else(|| Error::InvalidArgument(format!("{op} needs an item-correlation table")));
    Ok(match op {
        AugOp::Crop => crop(s, cfg.crop_ratio, rng),
        AugOp::Mask => mask(s, cfg.mask_ratio, mask_id, rng),
        AugOp::Reorder => reorder(s, cfg.reorder_ratio, rng),
        AugOp::Substitute => substitute(s, cfg.substitute_ratio, need_corr()?, rng),
        AugOp::Insert => insert(s, cfg.insert_ratio, need_corr()?, rng),
    })
}

/// Apply one enabled operation chosen uniformly. Returns the op as well so
/// callers can tally choices.
pub fn random_augment<R: Rng + ?Sized>(
    s: &[usize],
    cfg: &AugmentConfig,
    mask_id: usize,
    corr: Option<&ItemCorrelation>,
    rng: &mut R,
) -> Result<(AugOp, Vec<usize>)> {
    if cfg.ops.is_empty() {
        return Err(Error::InvalidArgument("no augmentation operations enabled".into()));
    }
    let op = cfg.ops[rng.random_range(0..cfg.ops.len())];
    apply(op, s, cfg, mask_id, corr, rng).map(|out| (op, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, "data-aug")
    }

    #[test]
    fn crop_examples() {
        let s = [1, 2, 3, 4, 5];
        assert_eq!(crop(&s, 1.0, &mut rng(0)), s.to_vec());
        assert_eq!(crop(&s, 0.6, &mut rng(0)).len(), 3);
        // pin a stream whose first draw over 0..=2 is 1 and read the window
        let seed = (0..).find(|&k| rng(k).random_range(0..=2usize) == 1).unwrap();
        assert_eq!(crop(&s, 0.6, &mut rng(seed)), vec![2, 3, 4]);
    }

    #[test]
    fn mask_examples() {
        let s = [4, 5, 6, 7];
        assert_eq!(mask(&s, 0.0, 99, &mut rng(1)), s.to_vec());
        let out = mask(&s, 0.5, 99, &mut rng(1));
        assert_eq!(out.iter().filter(|&&v| v == 99).count(), 2);
        for (a, b) in s.iter().zip(&out) {
            assert!(*b == 99 || a == b);
        }
    }

    #[test]
    fn reorder_short_segment_is_identity() {
        let s = [1, 2, 3, 4, 5];
        assert_eq!(reorder(&s, 0.2, &mut rng(2)), s.to_vec());
        assert_eq!(reorder(&[7], 1.0, &mut rng(2)), vec![7]);
    }

    fn corr() -> ItemCorrelation {
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1], vec![2, 4, 6]];
        ItemCorrelation::build(seqs.iter().map(Vec::as_slice), 8)
    }

    #[test]
    fn correlation_ranks_and_excludes_self() {
        let c = corr();
        for v in 1..=8 {
            let list = c.correlates(v);
            assert!(list.len() <= TOP_CORRELATES);
            assert!(list.iter().all(|&(u, s)| u != v && s >= 0.0));
            assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
        }
        assert!(c.correlates(7).is_empty());
        assert!(c.correlates(8).is_empty());
    }

    #[test]
    fn substitute_and_insert_examples() {
        let c = corr();
        let s = [1, 2, 3, 4, 5, 6, 7];
        assert_eq!(substitute(&s, 0.0, &c, &mut rng(3)), s.to_vec());
        assert_eq!(insert(&s, 0.0, &c, &mut rng(3)), s.to_vec());
        // ⌊0.3·7⌋ = 2 insertions
        assert_eq!(insert(&s, 0.3, &c, &mut rng(3)).len(), 9);
    }

    #[test]
    fn unseen_item_falls_back_to_catalog() {
        let c = corr();
        let out = substitute(&[7, 7, 7, 7], 0.99, &c, &mut rng(4));
        assert!(out.iter().all(|v| (1..=8).contains(v)));
    }

    #[test]
    fn single_op_is_always_chosen() {
        let cfg = AugmentConfig {
            ops: vec![AugOp::Reorder],
            ..AugmentConfig::default()
        };
        let mut r = rng(5);
        for _ in 0..50 {
            assert_eq!(random_augment(&[1, 2, 3], &cfg, 9, None, &mut r).unwrap().0, AugOp::Reorder);
        }
    }

    #[test]
    fn op_choice_frequencies() {
        let cfg = AugmentConfig::default();
        let mut r = rng(6);
        let n = 10_000;
        let mut hits: HashMap<AugOp, usize> = HashMap::new();
        for _ in 0..n {
            *hits.entry(random_augment(&[1, 2, 3, 4], &cfg, 9, None, &mut r).unwrap().0).or_default() += 1;
        }
        let p = 1.0 / 3.0;
        let se = (n as f64 * p * (1.0 - p)).sqrt();
        for op in [AugOp::Crop, AugOp::Mask, AugOp::Reorder] {
            let c = hits[&op] as f64;
            assert!((c - n as f64 * p).abs() <= 3.0 * se, "{op}: {c}");
        }
    }

    #[test]
    fn missing_correlation_is_an_error() {
        let cfg = AugmentConfig {
            ops: vec![AugOp::Insert],
            ..AugmentConfig::default()
        };
        assert!(random_augment(&[1, 2], &cfg, 9, None, &mut rng(0)).is_err());
        assert!(cfg.needs_correlation());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { crop_ratio: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { mask_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { ops: vec![], ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { ops: vec![], enabled: false, ..Default::default() }.validate().is_ok());
        assert_eq!("insert".parse::<AugOp>().unwrap(), AugOp::Insert);
        assert!("shuffle".parse::<AugOp>().is_err());
    }

    fn seq() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=8, 1..40)
    }

    proptest! {
        #[test]
        fn crop_is_contiguous_infix(s in seq(), eta in 0.01f64..=1.0, seed in any::<u64>()) {
            let out = crop(&s, eta, &mut rng(seed));
            let (len, target) = (out.len() as f64, eta * s.len() as f64);
            prop_assert!(out.len() >= 1 && len >= target - 1e-6 && (len < target + 1.0 || out.len() == 1));
            prop_assert!(s.windows(out.len()).any(|w| w == &out[..]));
        }

        #[test]
        fn all_ops_are_deterministic(s in seq(), seed in any::<u64>()) {
            let c = corr();
            let cfg = AugmentConfig { ops: AugOp::ALL.to_vec(), ..Default::default() };
            let a = random_augment(&s, &cfg, 9, Some(&c), &mut rng(seed)).unwrap();
            let b = random_augment(&s, &cfg, 9, Some(&c), &mut rng(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn outputs_are_valid_ids(s in seq(), seed in any::<u64>()) {
            let c = corr();
            let cfg = AugmentConfig { ops: AugOp::ALL.to_vec(), ..Default::default() };
            let (op, out) = random_augment(&s, &cfg, 9, Some(&c), &mut rng(seed)).unwrap();
            for v in out {
                prop_assert!((1..=8).contains(&v) || (op == AugOp::Mask && v == 9));
            }
        }
    }
}

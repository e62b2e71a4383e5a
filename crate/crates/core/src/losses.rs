//! Next-item log-likelihood, in-batch InfoNCE, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::dataset::PAD_ID;
use crate::encoders::HiddenStates;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Binary log-likelihood over every position with a target. `targets` is
/// aligned with the `[batch, maxlen]` layout and uses [`PAD_ID`] where there
/// is no target. `negatives` lists `n_neg` ids per targeted position, in
/// layout order. The result is the mean over targeted positions of
/// `-log σ(h·e⁺) - Σ log(1 - σ(h·e⁻))`.
pub fn rec_loss<T: Real>(
    tape: &Tape<T>,
    hidden: &HiddenStates,
    targets: &[usize],
    negatives: &[usize],
    n_neg: usize,
    table: Var,
) -> Result<Var> {
    if targets.len() != hidden.batch * hidden.maxlen {
        return Err(Error::shape(
            "rec_loss",
            format!("{} targets for {}x{} positions", targets.len(), hidden.batch, hidden.maxlen),
        ));
    }
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD_ID).collect();
    if rows.is_empty() {
        return Err(Error::Empty("rec_loss positions"));
    }
    if negatives.len() != rows.len() * n_neg {
        return Err(Error::shape(
            "rec_loss",
            format!("{} negatives for {} positions x {n_neg}", negatives.len(), rows.len()),
        ));
    }
    let pos_ids: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let h = tape.gather_rows(hidden.h, &rows)?;
    let e_pos = tape.embedding_lookup(table, &pos_ids)?;
    let pos_logit = tape.sum_last(tape.mul(h, e_pos)?);
    let mut total = tape.sum(tape.log_sigmoid(pos_logit));
    if n_neg > 0 {
        let neg_rows: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(r, n_neg)).collect();
        let hn = tape.gather_rows(hidden.h, &neg_rows)?;
        let e_neg = tape.embedding_lookup(table, negatives)?;
        let neg_logit = tape.sum_last(tape.mul(hn, e_neg)?);
        // log(1 - σ(x)) = log σ(-x)
        let neg = tape.sum(tape.log_sigmoid(tape.scale(neg_logit, -T::one())));
        total = tape.add(total, neg)?;
    }
    Ok(tape.scale(total, T::of(-1.0 / rows.len() as f64)))
}

/// InfoNCE over interleaved views `[2N, d]`: rows `2u` and `2u + 1` are the
/// two views of sequence `u`.
pub fn info_nce<T: Real>(tape: &Tape<T>, views: Var) -> Result<Var> {
    tape.info_nce(views)
}

/// Interleave branch embeddings `[N, d]` into the `[2N, d]` anchor layout.
pub fn pair_views<T: Real>(tape: &Tape<T>, branch1: Var, branch2: Var) -> Result<Var> {
    tape.interleave_rows(branch1, branch2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub ssl: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn joint_loss(rec: f64, ssl: f64, lambda: f64) -> LossReport {
    LossReport {
        rec,
        ssl,
        lambda,
        total: rec + lambda * ssl,
    }
}

/// `rec + λ·ssl` on the tape.
pub fn joint_loss_var<T: Real>(tape: &Tape<T>, rec: Var, ssl: Var, lambda: f64) -> Result<Var> {
    tape.add(rec, tape.scale(ssl, T::of(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, RngStream, Tensor};
    use proptest::prelude::*;

    fn hidden(tape: &Tape<f64>, h: Tensor<f64>) -> HiddenStates {
        let s = h.shape().to_vec();
        HiddenStates {
            h: tape.leaf(h, true),
            batch: s[0],
            maxlen: s[1],
            dim: s[2],
            lengths: vec![s[1]; s[0]],
        }
    }

    #[test]
    fn zero_logits_give_two_ln2() {
        let tape = Tape::<f64>::new();
        let hs = hidden(&tape, Tensor::zeros(&[1, 3, 4]));
        let table = tape.leaf(Tensor::randn(&[6, 4], 1.0, &mut RngStream::new(0, "t")), true);
        let loss = rec_loss(&tape, &hs, &[1, 2, 3], &[4, 5, 4], 1, table).unwrap();
        assert!((tape.scalar(loss) - 2.0 * std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let tape = Tape::<f64>::new();
        let hs = hidden(&tape, Tensor::new(vec![1, 1, 2], vec![50.0, 0.0]).unwrap());
        let table = tape.constant(Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap());
        let loss = rec_loss(&tape, &hs, &[1], &[2], 1, table).unwrap();
        assert!(tape.scalar(loss) < 1e-20);
    }

    #[test]
    fn all_padded_is_an_error() {
        let tape = Tape::<f64>::new();
        let hs = hidden(&tape, Tensor::zeros(&[1, 2, 2]));
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(rec_loss(&tape, &hs, &[0, 0], &[], 1, table).is_err());
    }

    #[test]
    fn pads_do_not_change_rec_loss() {
        let mut rng = RngStream::new(3, "pad");
        let h = Tensor::randn(&[1, 2, 3], 1.0, &mut rng);
        let table = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let base = {
            let tape = Tape::<f64>::new();
            let hs = hidden(&tape, h.clone());
            let t = tape.constant(table.clone());
            let l = rec_loss(&tape, &hs, &[1, 2], &[3, 4], 1, t).unwrap();
            tape.scalar(l)
        };
        // extra padded positions in front, with arbitrary states
        let mut vals = Tensor::<f64>::randn(&[1, 3, 3], 5.0, &mut rng).into_values();
        vals.extend_from_slice(h.values());
        let padded = Tensor::new(vec![1, 5, 3], vals).unwrap();
        let tape = Tape::<f64>::new();
        let hs = hidden(&tape, padded);
        let t = tape.constant(table);
        let l = rec_loss(&tape, &hs, &[0, 0, 0, 1, 2], &[3, 4], 1, t).unwrap();
        assert!((tape.scalar(l) - base).abs() <= 1e-12);
    }

    #[test]
    fn rec_loss_gradient_check() {
        let mut rng = RngStream::new(4, "grad");
        let table = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let hs = HiddenStates { h: x, batch: 2, maxlen: 3, dim: 3, lengths: vec![3, 2] };
                let t = tape.constant(table.clone());
                rec_loss(tape, &hs, &[1, 2, 3, 0, 4, 5], &[6, 6, 5, 4, 3, 2, 1, 1, 2, 3], 2, t)
            },
            &h,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = grad_check(
            |tape, t| {
                let hs = HiddenStates { h: tape.constant(h.clone()), batch: 2, maxlen: 3, dim: 3, lengths: vec![3, 2] };
                rec_loss(tape, &hs, &[1, 2, 3, 0, 4, 5], &[6, 6, 5, 4, 3], 1, t)
            },
            &table,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    /// Direct summation over anchors, written without the fused op.
    fn info_nce_oracle(v: &[Vec<f64>]) -> f64 {
        let n = v.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for a in 0..n {
            let partner = if a % 2 == 0 { a + 1 } else { a - 1 };
            let denom: f64 = (0..n).filter(|&m| m != a).map(|m| dot(&v[a], &v[m]).exp()).sum();
            total += -(dot(&v[a], &v[partner]).exp() / denom).ln();
        }
        total / n as f64
    }

    fn nce(views: &Tensor<f64>) -> f64 {
        let tape = Tape::<f64>::new();
        let v = tape.constant(views.clone());
        let l = info_nce(&tape, v).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn info_nce_closed_forms() {
        let one = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 1.5, 0.2, -0.7]).unwrap();
        assert!(nce(&one).abs() <= 1e-12);
        // identical rows: every similarity equal
        let same = Tensor::new(vec![4, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((nce(&same) - 3f64.ln()).abs() <= 1e-12);
        let same6 = Tensor::new(vec![6, 1], vec![1.0; 6]).unwrap();
        assert!((nce(&same6) - 5f64.ln()).abs() <= 1e-12);
        let tape = Tape::<f64>::new();
        let odd = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(info_nce(&tape, odd).is_err());
    }

    #[test]
    fn pair_views_interleaves() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let v = pair_views(&tape, a, b).unwrap();
        assert_eq!(tape.value(v).values(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_loss(1.3, 9.0, 0.0).total, 1.3);
        assert_eq!(joint_loss(1.0, 1.0, 1.0).total, 2.0);
    }

    #[test]
    fn joint_gradient_is_sum_of_parts() {
        let mut rng = RngStream::new(9, "joint");
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let lambda = 0.37;
        let grad_of = |which: u8| {
            let tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone(), true);
            let rec = tape.mean(tape.log_sigmoid(v));
            let ssl = info_nce(&tape, v).unwrap();
            let loss = match which {
                0 => rec,
                1 => ssl,
                _ => joint_loss_var(&tape, rec, ssl, lambda).unwrap(),
            };
            tape.backward(loss).unwrap().get(v).unwrap().to_vec()
        };
        let (r, s, j) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..j.len() {
            assert!((j[i] - (r[i] + lambda * s[i])).abs() <= 1e-12);
        }
    }

    fn views() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(-2.0f64..2.0, 2 * n * d)))
    }

    proptest! {
        #[test]
        fn info_nce_matches_oracle((n, d, vals) in views()) {
            let rows: Vec<Vec<f64>> = vals.chunks(d).map(|c| c.to_vec()).collect();
            let got = nce(&Tensor::new(vec![2 * n, d], vals).unwrap());
            prop_assert!((got - info_nce_oracle(&rows)).abs() <= 1e-9);
        }

        #[test]
        fn info_nce_swap_invariant((n, d, vals) in views(), u in 0usize..3) {
            let u = u % n;
            let mut swapped = vals.clone();
            for j in 0..d {
                swapped.swap(2 * u * d + j, (2 * u + 1) * d + j);
            }
            let a = nce(&Tensor::new(vec![2 * n, d], vals).unwrap());
            let b = nce(&Tensor::new(vec![2 * n, d], swapped).unwrap());
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn info_nce_finite_for_large_inputs(vals in prop::collection::vec(-1e3f64..1e3, 8)) {
            prop_assert!(nce(&Tensor::new(vec![4, 2], vals).unwrap()).is_finite());
        }
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        // moving an embedding changes several similarities at once, so
        // perturb one positive pair directly in the similarity matrix
        let loss_from_sims = |s: &[[f64; 4]; 4]| {
            let mut total = 0.0;
            for a in 0..4 {
                let p = a ^ 1;
                let denom: f64 = (0..4).filter(|&m| m != a).map(|m| s[a][m].exp()).sum();
                total -= (s[a][p].exp() / denom).ln();
            }
            total / 4.0
        };
        let mut rng = RngStream::new(2, "mono");
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mut s = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                s[a][b] = x.row(a).iter().zip(x.row(b)).map(|(p, q)| p * q).sum();
            }
        }
        assert!((loss_from_sims(&s) - nce(&x)).abs() <= 1e-12);
        let base = loss_from_sims(&s);
        s[0][1] += 0.1;
        s[1][0] += 0.1;
        assert!(loss_from_sims(&s) < base);
    }
}

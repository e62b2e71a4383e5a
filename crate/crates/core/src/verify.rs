//! Randomized finite-difference checks, in f64, over every differentiable
//! tape op and over a composed two-layer Transformer next-item loss.

use rand::Rng;

use crate::encoders::{EncoderConfig, EncoderKind, ForwardCtx, IdBatch};
use crate::error::Result;
use crate::losses::rec_loss;
use crate::model::{ModelConfig, SeqModel};
use crate::tensor::{grad_check, grad_check_params, ParamStore, RngStream, Tape, Tensor, Var};

const EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let mut t = uniform(shape, 0.1, 2.0, rng);
    for v in t.values_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Random-weighted sum, so every output element carries a distinct gradient.
fn weighted(tape: &Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    Ok(tape.sum(tape.mul(y, w)?))
}

fn dims(rng: &mut RngStream) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5))
}

type Case = Box<dyn Fn(&mut RngStream) -> Result<f64>>;

fn unary_case(f: fn(&Tape<f64>, Var) -> Var, positive: bool, kink: bool) -> Case {
    Box::new(move |rng| {
        let (a, b, _) = dims(rng);
        let x = if positive {
            uniform(&[a, b], 0.5, 3.0, rng)
        } else if kink {
            away_from_zero(&[a, b], rng)
        } else {
            uniform(&[a, b], -2.5, 2.5, rng)
        };
        let w = Tensor::randn(&[a, b], 1.0, rng);
        grad_check(|t, x| weighted(t, f(t, x), &w), &x, EPS)
    })
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        (
            "matmul",
            Box::new(|rng| {
                let (m, k, n) = dims(rng);
                let a = Tensor::randn(&[m, k], 1.0, rng);
                let b = Tensor::randn(&[k, n], 1.0, rng);
                let w = Tensor::randn(&[m, n], 1.0, rng);
                let ea = grad_check(|t, x| weighted(t, t.matmul(x, t.constant(b.clone()))?, &w), &a, EPS)?;
                let eb = grad_check(|t, x| weighted(t, t.matmul(t.constant(a.clone()), x)?, &w), &b, EPS)?;
                Ok(ea.max(eb))
            }),
        ),
        (
            "bmm",
            Box::new(|rng| {
                let (m, k, n) = dims(rng);
                let batch = rng.random_range(1..4);
                let trans = rng.random_bool(0.5);
                let a = Tensor::randn(&[batch, m, k], 1.0, rng);
                let b_shape = if trans { [batch, n, k] } else { [batch, k, n] };
                let b = Tensor::randn(&b_shape, 1.0, rng);
                let w = Tensor::randn(&[batch, m, n], 1.0, rng);
                let ea = grad_check(|t, x| weighted(t, t.bmm(x, t.constant(b.clone()), trans)?, &w), &a, EPS)?;
                let eb = grad_check(|t, x| weighted(t, t.bmm(t.constant(a.clone()), x, trans)?, &w), &b, EPS)?;
                Ok(ea.max(eb))
            }),
        ),
        (
            "add",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let y = Tensor::randn(&[a, b], 1.0, rng);
                let w = Tensor::randn(&[a, b], 1.0, rng);
                grad_check(|t, v| weighted(t, t.add(v, t.constant(y.clone()))?, &w), &x, EPS)
            }),
        ),
        (
            "mul",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let y = Tensor::randn(&[a, b], 1.0, rng);
                let w = Tensor::randn(&[a, b], 1.0, rng);
                let ex = grad_check(|t, v| weighted(t, t.mul(v, t.constant(y.clone()))?, &w), &x, EPS)?;
                // both operands the same node
                let es = grad_check(|t, v| weighted(t, t.mul(v, v)?, &w), &x, EPS)?;
                Ok(ex.max(es))
            }),
        ),
        (
            "add_broadcast",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let x = Tensor::randn(&[a, b, c], 1.0, rng);
                let bias = Tensor::randn(&[b, c], 1.0, rng);
                let w = Tensor::randn(&[a, b, c], 1.0, rng);
                let ex = grad_check(|t, v| weighted(t, t.add_broadcast(v, t.constant(bias.clone()))?, &w), &x, EPS)?;
                let eb = grad_check(|t, v| weighted(t, t.add_broadcast(t.constant(x.clone()), v)?, &w), &bias, EPS)?;
                Ok(ex.max(eb))
            }),
        ),
        (
            "affine",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let (s, c) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                let w = Tensor::randn(&[a, b], 1.0, rng);
                grad_check(|t, v| weighted(t, t.affine(v, s, c), &w), &x, EPS)
            }),
        ),
        (
            "scale_rows",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let f: Vec<f64> = (0..a).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w = Tensor::randn(&[a, b], 1.0, rng);
                grad_check(|t, v| weighted(t, t.scale_rows(v, f.clone())?, &w), &x, EPS)
            }),
        ),
        ("sigmoid", unary_case(|t, x| t.sigmoid(x), false, false)),
        ("tanh", unary_case(|t, x| t.tanh(x), false, false)),
        ("relu", unary_case(|t, x| t.relu(x), false, true)),
        ("gelu", unary_case(|t, x| t.gelu(x), false, false)),
        ("log", unary_case(|t, x| t.log(x), true, false)),
        ("exp", unary_case(|t, x| t.exp(x), false, false)),
        ("log_sigmoid", unary_case(|t, x| t.log_sigmoid(x), false, false)),
        (
            "sum_mean",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let es = grad_check(|t, v| Ok(t.sum(v)), &x, EPS)?;
                let em = grad_check(|t, v| Ok(t.mean(v)), &x, EPS)?;
                Ok(es.max(em))
            }),
        ),
        (
            "sum_last",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let x = Tensor::randn(&[a, b, c], 1.0, rng);
                let w = Tensor::randn(&[a, b], 1.0, rng);
                grad_check(|t, v| weighted(t, t.sum_last(v), &w), &x, EPS)
            }),
        ),
        (
            "softmax_rows",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b + 1], 2.0, rng);
                let w = Tensor::randn(&[a, b + 1], 1.0, rng);
                grad_check(|t, v| weighted(t, t.softmax_rows(v), &w), &x, EPS)
            }),
        ),
        (
            "masked_softmax_rows",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let w_ = b + 1;
                let x = Tensor::randn(&[a, w_], 2.0, rng);
                let mut allowed: Vec<bool> = (0..a * w_).map(|_| rng.random_bool(0.6)).collect();
                for r in 0..a {
                    allowed[r * w_] = true;
                }
                let w = Tensor::randn(&[a, w_], 1.0, rng);
                grad_check(|t, v| weighted(t, t.masked_softmax_rows(v, &allowed)?, &w), &x, EPS)
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng| {
                let (a, _, c) = dims(rng);
                // with two features the normalized output is constant up to
                // eps and the x-gradient vanishes into rounding noise
                let d = c + 2;
                let x = Tensor::randn(&[a, d], 1.5, rng);
                let g = uniform(&[d], 0.5, 1.5, rng);
                let bias = Tensor::randn(&[d], 0.5, rng);
                let w = Tensor::randn(&[a, d], 1.0, rng);
                let ln = |t: &Tape<f64>, x: Var, g: Var, b: Var| weighted(t, t.layer_norm(x, g, b, 1e-5)?, &w);
                let ex = grad_check(|t, v| ln(t, v, t.constant(g.clone()), t.constant(bias.clone())), &x, EPS)?;
                let eg = grad_check(|t, v| ln(t, t.constant(x.clone()), v, t.constant(bias.clone())), &g, EPS)?;
                let eb = grad_check(|t, v| ln(t, t.constant(x.clone()), t.constant(g.clone()), v), &bias, EPS)?;
                Ok(ex.max(eg).max(eb))
            }),
        ),
        (
            "dropout",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a, b], 1.0, rng);
                let p = rng.random_range(0.0..0.8);
                let seed = rng.random();
                let w = Tensor::randn(&[a, b], 1.0, rng);
                // the mask stream is re-created on every evaluation
                grad_check(|t, v| weighted(t, t.dropout(v, p, &mut RngStream::new(seed, "gradcheck"), true)?, &w), &x, EPS)
            }),
        ),
        (
            "gather_rows",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = Tensor::randn(&[a + 1, b], 1.0, rng);
                let k = rng.random_range(1..6);
                let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..=a)).collect();
                let w = Tensor::randn(&[k, b], 1.0, rng);
                grad_check(|t, v| weighted(t, t.embedding_lookup(v, &rows)?, &w), &x, EPS)
            }),
        ),
        (
            "reshape_swap_axes",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let d = rng.random_range(1..4);
                let x = Tensor::randn(&[a * b, c * d], 1.0, rng);
                let w = Tensor::randn(&[a, c, b, d], 1.0, rng);
                grad_check(|t, v| weighted(t, t.swap_axes12(t.reshape(v, &[a, b, c, d])?)?, &w), &x, EPS)
            }),
        ),
        (
            "slice_last",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let width = b + 2;
                let start = rng.random_range(0..width);
                let len = rng.random_range(1..=width - start);
                let x = Tensor::randn(&[a, width], 1.0, rng);
                let w = Tensor::randn(&[a, len], 1.0, rng);
                grad_check(|t, v| weighted(t, t.slice_last(v, start, len)?, &w), &x, EPS)
            }),
        ),
        (
            "stack",
            Box::new(|rng| {
                let (bsz, steps, d) = dims(rng);
                let x = Tensor::randn(&[bsz, d], 1.0, rng);
                let others: Vec<Tensor<f64>> = (0..steps).map(|_| Tensor::randn(&[bsz, d], 1.0, rng)).collect();
                let w = Tensor::randn(&[bsz, steps + 1, d], 1.0, rng);
                grad_check(
                    |t, v| {
                        let mut parts: Vec<Var> = others.iter().map(|o| t.constant(o.clone())).collect();
                        parts.insert(steps / 2, t.tanh(v));
                        weighted(t, t.stack(&parts)?, &w)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "interleave_rows",
            Box::new(|rng| {
                let (n, _, d) = dims(rng);
                let x = Tensor::randn(&[n, d], 1.0, rng);
                let y = Tensor::randn(&[n, d], 1.0, rng);
                let w = Tensor::randn(&[2 * n, d], 1.0, rng);
                let ea = grad_check(|t, v| weighted(t, t.interleave_rows(v, t.constant(y.clone()))?, &w), &x, EPS)?;
                let eb = grad_check(|t, v| weighted(t, t.interleave_rows(t.constant(x.clone()), v)?, &w), &y, EPS)?;
                Ok(ea.max(eb))
            }),
        ),
        (
            "info_nce",
            Box::new(|rng| {
                let (n, _, d) = dims(rng);
                let x = Tensor::randn(&[2 * n, d + 1], 0.7, rng);
                grad_check(|t, v| t.info_nce(v), &x, EPS)
            }),
        ),
    ]
}

/// Every op family checked on `cases` random shapes and values each.
pub fn check_ops(seed: u64, cases: usize) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        let mut rng = RngStream::new(seed, format!("gradcheck/{name}"));
        let mut worst = 0.0f64;
        for _ in 0..cases {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckReport {
            name,
            cases,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Next-item loss of a two-layer Transformer on length-4 sequences, checked
/// against every parameter, with a pinned neuron-mask stream.
pub fn check_composed(seed: u64, cases: usize) -> Result<CheckReport> {
    let num_items = 6;
    let cfg = ModelConfig {
        num_items,
        encoder: EncoderConfig {
            kind: EncoderKind::Transformer,
            layers: 2,
            dim: 4,
            heads: 2,
            maxlen: 4,
            ln_eps: 1e-5,
        },
        stack_layers: 1,
    };
    let mut rng = RngStream::new(seed, "gradcheck/composed");
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let model = SeqModel::new(&mut store, "m", &cfg, seed.wrapping_add(case as u64))?;
        let batch_size = rng.random_range(1..3);
        let seqs: Vec<Vec<usize>> = (0..batch_size)
            .map(|_| (0..rng.random_range(2..=4)).map(|_| rng.random_range(1..=num_items)).collect())
            .collect();
        let batch = IdBatch::new(&seqs, 4);
        // next item at every real position
        let targets: Vec<usize> = batch
            .ids
            .iter()
            .map(|&id| if id == 0 { 0 } else { rng.random_range(1..=num_items) })
            .collect();
        let n_pos = targets.iter().filter(|&&t| t != 0).count();
        let negatives: Vec<usize> = (0..n_pos).map(|_| rng.random_range(1..=num_items)).collect();
        let p = rng.random_range(0.0..0.5);
        let err = grad_check_params(
            |tape, bound| {
                let mut ctx = ForwardCtx::train(seed, "gradcheck", &format!("c{case}"), p, 0.0, 0);
                let out = model.forward(tape, bound, &batch, &mut ctx)?;
                rec_loss(tape, &out.hidden, &targets, &negatives, 1, bound.var(model.item_table()))
            },
            &mut store,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport {
        name: "transformer-2-layer",
        cases,
        max_rel_err: worst,
    })
}

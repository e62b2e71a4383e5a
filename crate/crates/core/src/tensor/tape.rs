use std::cell::{Cell, Ref, RefCell};

use rand::Rng;

use super::{Real, RngStream, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    LogSigmoid,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::LogSigmoid => "log_sigmoid",
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: T },
    ScaleRows { x: usize, factors: Vec<T> },
    Unary { x: usize, kind: Unary },
    Gelu { x: usize, tanh: Vec<T> },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: usize, mask: Vec<T> },
    Gather { x: usize, rows: Vec<usize> },
    Reshape { x: usize },
    SwapAxes12 { x: usize },
    SliceLast { x: usize, start: usize },
    Stack { parts: Vec<usize> },
    Interleave { a: usize, b: usize },
    InfoNce { z: usize, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Unary { kind, .. } => kind.name(),
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumLast { .. } => "sum_last",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::SwapAxes12 { .. } => "swap_axes12",
            Op::SliceLast { .. } => "slice_last",
            Op::Stack { .. } => "stack",
            Op::Interleave { .. } => "interleave",
            Op::InfoNce { .. } => "info_nce",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBroadcast { a, b }
            | Op::Mul { a, b }
            | Op::Interleave { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Stack { parts } => parts.clone(),
            Op::Affine { x, .. }
            | Op::ScaleRows { x, .. }
            | Op::Unary { x, .. }
            | Op::Gelu { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumLast { x }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::SwapAxes12 { x }
            | Op::SliceLast { x, .. } => vec![*x],
            Op::InfoNce { z, .. } => vec![*z],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Ops never modify their inputs; every result is a new node. The first op
/// producing a NaN or infinity is remembered and reported by
/// [`Tape::check_finite`] and [`Tape::backward`].
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    non_finite: Cell<Option<(usize, &'static str)>>,
}

/// Gradients of one backward pass, readable for leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu_inner<T: Real>(x: T) -> T {
    T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x)
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        self.push_with(&mut nodes, value, op, requires_grad)
    }

    fn push_with(&self, nodes: &mut Vec<Node<T>>, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some((id, op.name())));
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    /// A leaf; gradients are computed for it only when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        self.push_with(&mut nodes, value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.values()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some((id, op)) => Err(Error::NonFinite {
                op: format!("{op} (node {id})"),
            }),
            None => Ok(()),
        }
    }

    fn unary(&self, x: Var, kind: Unary) -> Var {
        let y = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let vals = xv
                .values()
                .iter()
                .map(|&a| match kind {
                    Unary::Sigmoid => sigmoid(a),
                    Unary::Tanh => a.tanh_fast(),
                    Unary::Relu => a.max(T::zero()),
                    Unary::Log => a.ln(),
                    Unary::Exp => a.exp(),
                    Unary::LogSigmoid => a.min(T::zero()) - (T::one() + (-a.abs()).exp()).ln(),
                })
                .collect();
            Tensor::from_parts(xv.shape().to_vec(), vals)
        };
        self.push(y, Op::Unary { x: x.0, kind })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&self, x: Var) -> Var {
        let (y, tanh) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            // tanh-approximation GELU; the inner tanh is kept for backward
            let ts: Vec<T> = xv.values().iter().map(|&a| gelu_inner(a).tanh_fast()).collect();
            let ys = xv.values().iter().zip(&ts).map(|(&a, &t)| T::of(0.5) * a * (T::one() + t)).collect();
            (Tensor::from_parts(xv.shape().to_vec(), ys), ts)
        };
        self.push(y, Op::Gelu { x: x.0, tanh })
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// `ln σ(x)`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }

    /// Matrix product. `a` is `[.., k]` and is treated as a stack of rows,
    /// `b` is `[k, n]`; the result is `[.., n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", av.shape(), bv.shape()),
                ));
            }
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k;
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, av.values(), (k as isize, 1), bv.values(), (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, c)
        };
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(bad());
            }
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = if trans_b { sb[1] } else { sb[2] };
            let kb = if trans_b { sb[2] } else { sb[1] };
            if kb != k {
                return Err(bad());
            }
            let mut c = vec![T::zero(); batch * m * n];
            let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av.values()[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv.values()[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut c[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
            Tensor::from_parts(vec![batch, m, n], c)
        };
        Ok(self.push(out, Op::BatchMatMul { a: a.0, b: b.0, trans_b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let vals = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), vals)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, positional
    /// tables), repeated over the leading dimensions.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::shape("add_broadcast", format!("{sa:?} + {sb:?}")));
            }
            let w = bv.numel();
            let mut vals = av.values().to_vec();
            for chunk in vals.chunks_mut(w) {
                add_into(chunk, bv.values());
            }
            Tensor::from_parts(sa.to_vec(), vals)
        };
        Ok(self.push(out, Op::AddBroadcast { a: a.0, b: b.0 }))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let vals = xv.values().iter().map(|&v| scale * v + shift).collect();
            Tensor::from_parts(xv.shape().to_vec(), vals)
        };
        self.push(out, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Multiply row `r` (over the last dimension) by the constant `factors[r]`.
    pub fn scale_rows(&self, x: Var, factors: Vec<T>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let w = xv.last_dim();
            if factors.len() * w != xv.numel() {
                return Err(Error::shape(
                    "scale_rows",
                    format!("{} factors for shape {:?}", factors.len(), xv.shape()),
                ));
            }
            let mut vals = xv.values().to_vec();
            for (row, &f) in vals.chunks_mut(w).zip(&factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::from_parts(xv.shape().to_vec(), vals)
        };
        Ok(self.push(out, Op::ScaleRows { x: x.0, factors }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.values().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            xv.values().iter().copied().sum::<T>() / T::of(xv.numel() as f64)
        };
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 })
    }

    /// Sum over the last dimension.
    pub fn sum_last(&self, x: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let w = xv.last_dim();
            let vals: Vec<T> = xv.values().chunks(w).map(|r| r.iter().copied().sum()).collect();
            let mut shape = xv.shape()[..xv.shape().len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, vals)
        };
        self.push(out, Op::SumLast { x: x.0 })
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_rows(&self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last dimension restricted to entries where `allowed`
    /// is true; masked entries are exactly zero and a fully masked row is
    /// all zeros.
    pub fn masked_softmax_rows(&self, x: Var, allowed: &[bool]) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.numel();
        if allowed.len() != n {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask has {} entries for {n} values", allowed.len()),
            ));
        }
        Ok(self.softmax_impl(x, Some(allowed)))
    }

    fn softmax_impl(&self, x: Var, allowed: Option<&[bool]>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let w = xv.last_dim();
            let mut vals = vec![T::zero(); xv.numel()];
            for (r, (src, dst)) in xv.values().chunks(w).zip(vals.chunks_mut(w)).enumerate() {
                let ok = |j: usize| allowed.is_none_or(|m| m[r * w + j]);
                let mut max = T::neg_infinity();
                for (j, &v) in src.iter().enumerate() {
                    if ok(j) && v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for (j, (&s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                    if ok(j) {
                        *d = (s - max).exp();
                        total += *d;
                    }
                }
                dst.iter_mut().for_each(|d| *d = *d / total);
            }
            Tensor::from_parts(xv.shape().to_vec(), vals)
        };
        self.push(out, Op::Softmax { x: x.0 })
    }

    /// Normalize each row over the last dimension, then apply `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let w = xv.last_dim();
            if gv.shape() != [w] || bv.shape() != [w] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("input {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
                ));
            }
            let rows = xv.numel() / w;
            let mut xhat = vec![T::zero(); xv.numel()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); xv.numel()];
            let wn = T::of(w as f64);
            for r in 0..rows {
                let src = &xv.values()[r * w..(r + 1) * w];
                let mean = src.iter().copied().sum::<T>() / wn;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wn;
                // a constant row with eps = 0 normalizes to zeros, not NaN
                let denom = var + eps;
                let rs = if denom > T::zero() { T::one() / denom.sqrt() } else { T::zero() };
                rstd[r] = rs;
                for j in 0..w {
                    let h = (src[j] - mean) * rs;
                    xhat[r * w + j] = h;
                    out[r * w + j] = h * gv.values()[j] + bv.values()[j];
                }
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), xhat, rstd)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; a fresh mask is drawn on
    /// every call. In eval mode, or with `p == 0`, `x` itself is returned.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let (out, mask) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            // drop when a uniform u32 falls below p * 2^32
            let cut = (p * 4_294_967_296.0) as u64;
            let mask: Vec<T> = (0..xv.numel())
                .map(|_| if u64::from(rng.random::<u32>()) < cut { T::zero() } else { keep })
                .collect();
            let vals = xv.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::from_parts(xv.shape().to_vec(), vals), mask)
        };
        Ok(self.push(out, Op::Dropout { x: x.0, mask }))
    }

    /// Rows of `x` (viewed as `[numel / last_dim, last_dim]`) at `rows`;
    /// the result is `[rows.len(), last_dim]`.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let w = xv.last_dim();
            let n = xv.numel() / w;
            if rows.is_empty() {
                return Err(Error::Empty("gather_rows index list"));
            }
            let mut vals = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                if r >= n {
                    return Err(Error::IdOutOfRange { id: r, rows: n });
                }
                vals.extend_from_slice(&xv.values()[r * w..(r + 1) * w]);
            }
            Tensor::from_parts(vec![rows.len(), w], vals)
        };
        Ok(self.push(out, Op::Gather { x: x.0, rows: rows.to_vec() }))
    }

    /// Embedding rows of `table` for `ids`.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(shape.to_vec(), xv.values().to_vec())?
        };
        Ok(self.push(out, Op::Reshape { x: x.0 }))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() != 4 {
                return Err(Error::shape("swap_axes12", format!("needs rank 4, got {s:?}")));
            }
            let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
            let src = xv.values();
            let mut vals = vec![T::zero(); src.len()];
            for i in 0..a {
                for j in 0..b {
                    for k in 0..c {
                        let from = ((i * b + j) * c + k) * d;
                        let to = ((i * c + k) * b + j) * d;
                        vals[to..to + d].copy_from_slice(&src[from..from + d]);
                    }
                }
            }
            Tensor::from_parts(vec![a, c, b, d], vals)
        };
        Ok(self.push(out, Op::SwapAxes12 { x: x.0 }))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let w = xv.last_dim();
            if len == 0 || start + len > w {
                return Err(Error::shape(
                    "slice_last",
                    format!("{start}..{} of width {w}", start + len),
                ));
            }
            let vals = xv.values().chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, vals)
        };
        Ok(self.push(out, Op::SliceLast { x: x.0, start }))
    }

    /// Stack `T` tensors of shape `[B, d]` into `[B, T, d]`.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or(Error::Empty("stack inputs"))?;
            let s = nodes[first.0].value.shape().to_vec();
            if s.len() != 2 || parts.iter().any(|p| nodes[p.0].value.shape() != s) {
                return Err(Error::shape("stack", "parts must share one [B, d] shape"));
            }
            let (b, d, t) = (s[0], s[1], parts.len());
            let mut vals = vec![T::zero(); b * t * d];
            for (ti, p) in parts.iter().enumerate() {
                let src = nodes[p.0].value.values();
                for bi in 0..b {
                    let to = (bi * t + ti) * d;
                    vals[to..to + d].copy_from_slice(&src[bi * d..(bi + 1) * d]);
                }
            }
            Tensor::from_parts(vec![b, t, d], vals)
        };
        Ok(self.push(
            out,
            Op::Stack {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Rows `a0, b0, a1, b1, ...` from two `[N, d]` tensors.
    pub fn interleave_rows(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("interleave_rows", a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape().len() != 2 {
                return Err(Error::shape("interleave_rows", format!("needs rank 2, got {:?}", av.shape())));
            }
            let (n, d) = (av.shape()[0], av.shape()[1]);
            let mut vals = Vec::with_capacity(2 * n * d);
            for i in 0..n {
                vals.extend_from_slice(av.row(i));
                vals.extend_from_slice(bv.row(i));
            }
            Tensor::from_parts(vec![2 * n, d], vals)
        };
        Ok(self.push(out, Op::Interleave { a: a.0, b: b.0 }))
    }

    /// InfoNCE over `2N` view embeddings where rows `2u` and `2u + 1` are the
    /// two views of sequence `u`. Similarity is the raw dot product; each
    /// anchor's denominator runs over every other row, its partner included.
    /// The result is the mean over all `2N` anchors.
    pub fn info_nce(&self, views: Var) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let zv = &nodes[views.0].value;
            let s = zv.shape();
            if s.len() != 2 || !s[0].is_multiple_of(2) {
                return Err(Error::shape("info_nce", format!("needs [2N, d], got {s:?}")));
            }
            let (rows, d) = (s[0], s[1]);
            if rows == 0 {
                return Err(Error::Empty("info_nce batch"));
            }
            let mut sim = vec![T::zero(); rows * rows];
            T::gemm(rows, d, rows, zv.values(), (d as isize, 1), zv.values(), (1, d as isize), T::zero(), &mut sim, (rows as isize, 1));
            let mut probs = vec![T::zero(); rows * rows];
            let mut total = T::zero();
            for a in 0..rows {
                let row = &sim[a * rows..(a + 1) * rows];
                let partner = a ^ 1;
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|&(m, _)| m != a)
                    .map(|(_, &v)| v)
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for m in (0..rows).filter(|&m| m != a) {
                    let e = (row[m] - max).exp();
                    probs[a * rows + m] = e;
                    z += e;
                }
                for m in (0..rows).filter(|&m| m != a) {
                    probs[a * rows + m] = probs[a * rows + m] / z;
                }
                total += max + z.ln() - row[partner];
            }
            (total / T::of(rows as f64), probs)
        };
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { z: views.0, probs }))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have one element, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let y = node.value.values();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k;
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA += dC · Bᵀ
                T::gemm(m, n, k, g, (n as isize, 1), bv.values(), (1, n as isize), T::one(), ga, (k as isize, 1));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB += Aᵀ · dC
                T::gemm(k, m, n, av.values(), (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let (mk, kn, mn) = (m * k, k * n, m * n);
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA_i += dC_i · op(B_i)ᵀ
                let b_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                for bi in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * mn..(bi + 1) * mn],
                        (n as isize, 1),
                        &bv.values()[bi * kn..(bi + 1) * kn],
                        b_strides,
                        T::one(),
                        &mut ga[bi * mk..(bi + 1) * mk],
                        (k as isize, 1),
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    let ga_i = &av.values()[bi * mk..(bi + 1) * mk];
                    let g_i = &g[bi * mn..(bi + 1) * mn];
                    let out = &mut gb[bi * kn..(bi + 1) * kn];
                    if *trans_b {
                        // B is [n, k]: dB += dCᵀ · A
                        T::gemm(n, m, k, g_i, (1, n as isize), ga_i, (k as isize, 1), T::one(), out, (k as isize, 1));
                    } else {
                        // dB += Aᵀ · dC
                        T::gemm(k, m, n, ga_i, (1, k as isize), g_i, (n as isize, 1), T::one(), out, (n as isize, 1));
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::AddBroadcast { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let w = gb.len();
                for chunk in g.chunks(w) {
                    add_into(gb, chunk);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += *scale * gi;
                }
            }
        }
        Op::ScaleRows { x, factors } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let w = node.value.last_dim();
                for ((drow, grow), &f) in gx.chunks_mut(w).zip(g.chunks(w)).zip(factors) {
                    for (d, &gi) in drow.iter_mut().zip(grow) {
                        *d += f * gi;
                    }
                }
            }
        }
        Op::Unary { x, kind } => {
            let xv = nodes[*x].value.values();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (j, d) in gx.iter_mut().enumerate() {
                    let (xi, yi, gi) = (xv[j], y[j], g[j]);
                    let local = match kind {
                        Unary::Sigmoid => yi * (T::one() - yi),
                        Unary::Tanh => T::one() - yi * yi,
                        Unary::Relu => {
                            if xi > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Log => T::one() / xi,
                        Unary::Exp => yi,
                        Unary::LogSigmoid => sigmoid(-xi),
                    };
                    *d += gi * local;
                }
            }
        }
        Op::Gelu { x, tanh } => {
            let xv = nodes[*x].value.values();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (((d, &gi), &xi), &ti) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                    *d += gi * gelu_grad(xi, ti);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / T::of(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumLast { x } => {
            let w = nodes[*x].value.last_dim();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (row, &gi) in gx.chunks_mut(w).zip(g) {
                    row.iter_mut().for_each(|d| *d += gi);
                }
            }
        }
        Op::Softmax { x } => {
            let w = node.value.last_dim();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in gx.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let w = node.value.last_dim();
            let gv = nodes[*gain].value.values();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(w).zip(xhat.chunks(w)) {
                    for ((d, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                        *d += gi * hi;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for grow in g.chunks(w) {
                    add_into(gb, grow);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let wn = T::of(w as f64);
                let mut dh = vec![T::zero(); w];
                for (r, ((drow, grow), hrow)) in gx.chunks_mut(w).zip(g.chunks(w)).zip(xhat.chunks(w)).enumerate() {
                    for j in 0..w {
                        dh[j] = grow[j] * gv[j];
                    }
                    let mean_dh = dh.iter().copied().sum::<T>() / wn;
                    let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / wn;
                    for j in 0..w {
                        drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::Gather { x, rows } => {
            let w = node.value.last_dim();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::SwapAxes12 { x } => {
            let s = nodes[*x].value.shape();
            let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            let to = ((i * b + j) * c + k) * d;
                            let from = ((i * c + k) * b + j) * d;
                            add_into(&mut gx[to..to + d], &g[from..from + d]);
                        }
                    }
                }
            }
        }
        Op::SliceLast { x, start } => {
            let w = nodes[*x].value.last_dim();
            let len = node.value.last_dim();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (drow, grow) in gx.chunks_mut(w).zip(g.chunks(len)) {
                    add_into(&mut drow[*start..*start + len], grow);
                }
            }
        }
        Op::Stack { parts } => {
            let s = node.value.shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            for (ti, &p) in parts.iter().enumerate() {
                if let Some(gp) = slot(nodes, grads, p) {
                    for bi in 0..b {
                        let from = (bi * t + ti) * d;
                        add_into(&mut gp[bi * d..(bi + 1) * d], &g[from..from + d]);
                    }
                }
            }
        }
        Op::Interleave { a, b } => {
            let d = node.value.last_dim();
            let n = node.value.shape()[0] / 2;
            for (src, off) in [(*a, 0usize), (*b, 1usize)] {
                if let Some(gs) = slot(nodes, grads, src) {
                    for r in 0..n {
                        let from = (2 * r + off) * d;
                        add_into(&mut gs[r * d..(r + 1) * d], &g[from..from + d]);
                    }
                }
            }
        }
        Op::InfoNce { z, probs } => {
            let zv = &nodes[*z].value;
            let (rows, d) = (zv.shape()[0], zv.shape()[1]);
            if let Some(gz) = slot(nodes, grads, *z) {
                let scale = g[0] / T::of(rows as f64);
                // dS[a, m] = (P[a, m] - [m == partner(a)]) / 2N, symmetrized.
                let mut ds = vec![T::zero(); rows * rows];
                for a in 0..rows {
                    for m in 0..rows {
                        if m == a {
                            continue;
                        }
                        let mut v = probs[a * rows + m];
                        if m == (a ^ 1) {
                            v -= T::one();
                        }
                        ds[a * rows + m] += v * scale;
                        ds[m * rows + a] += v * scale;
                    }
                }
                T::gemm(rows, rows, d, &ds, (rows as isize, 1), zv.values(), (d as isize, 1), T::one(), gz, (d as isize, 1));
            }
        }
    }
}

//! Sequence encoders mapping padded id batches to per-position hidden states.

mod gru;
mod transformer;

use std::fmt;
use std::str::FromStr;

pub use gru::GruEncoder;
pub use transformer::TransformerEncoder;

use crate::dataset::{pad_truncate, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Real, RngStream, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    Gru,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Gru => "gru",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderKind::Transformer),
            "gru" => Ok(EncoderKind::Gru),
            other => Err(Error::InvalidArgument(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub maxlen: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Transformer,
            layers: 2,
            dim: 64,
            heads: 2,
            maxlen: 50,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 || self.maxlen == 0 || self.layers == 0 {
            return bad(format!(
                "encoder needs positive dim, maxlen and layers (got {}, {}, {})",
                self.dim, self.maxlen, self.layers
            ));
        }
        if self.kind == EncoderKind::Transformer && (self.heads == 0 || !self.dim.is_multiple_of(self.heads)) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !(self.ln_eps >= 0.0) {
            return bad(format!("layer-norm eps {} must be non-negative", self.ln_eps));
        }
        Ok(())
    }
}

/// A batch of left-padded id sequences, row-major `[batch, maxlen]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub maxlen: usize,
    pub lengths: Vec<usize>,
}

impl IdBatch {
    pub fn new<S: AsRef<[usize]>>(sequences: &[S], maxlen: usize) -> Self {
        let mut ids = Vec::with_capacity(sequences.len() * maxlen);
        let mut lengths = Vec::with_capacity(sequences.len());
        for s in sequences {
            let (row, len) = pad_truncate(s.as_ref(), maxlen, PAD_ID);
            ids.extend(row);
            lengths.push(len);
        }
        Self {
            ids,
            batch: sequences.len(),
            maxlen,
            lengths,
        }
    }

    /// One factor per position: 1 for real items, 0 for padding.
    pub fn keep_factors<T: Real>(&self) -> Vec<T> {
        self.ids.iter().map(|&v| if v == PAD_ID { T::zero() } else { T::one() }).collect()
    }
}

/// Per-purpose randomness and switches for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    /// Dropout on the hidden activation of every FFN layer.
    pub neuron_p: f64,
    pub attn_p: f64,
    /// Number of post-encoder stack layers to skip.
    pub layer_drop: usize,
    pub neuron_rng: RngStream,
    pub attn_rng: RngStream,
    pub layer_rng: RngStream,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            neuron_p: 0.0,
            attn_p: 0.0,
            layer_drop: 0,
            neuron_rng: RngStream::new(0, "neuron-mask/eval"),
            attn_rng: RngStream::new(0, "attn-dropout/eval"),
            layer_rng: RngStream::new(0, "layer-drop/eval"),
        }
    }

    /// Training context whose streams are labeled by `view` and `step` (an
    /// arbitrary suffix such as `e3/b7`).
    pub fn train(seed: u64, view: &str, step: &str, neuron_p: f64, attn_p: f64, layer_drop: usize) -> Self {
        Self {
            training: true,
            neuron_p,
            attn_p,
            layer_drop,
            neuron_rng: RngStream::new(seed, format!("neuron-mask/{view}/{step}")),
            attn_rng: RngStream::new(seed, format!("attn-dropout/{view}/{step}")),
            layer_rng: RngStream::new(seed, format!("layer-drop/{view}/{step}")),
        }
    }
}

/// Per-position hidden states `[batch, maxlen, dim]`, pad rows zero.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub h: Var,
    pub batch: usize,
    pub maxlen: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
}

impl HiddenStates {
    /// Hidden state at the newest position of every sequence, `[batch, dim]`.
    pub fn last_hidden<T: Real>(&self, tape: &Tape<T>) -> Result<Var> {
        if self.lengths.contains(&0) {
            return Err(Error::Empty("sequence for last_hidden"));
        }
        let rows: Vec<usize> = (0..self.batch).map(|b| b * self.maxlen + self.maxlen - 1).collect();
        tape.gather_rows(self.h, &rows)
    }

    pub fn with_h(&self, h: Var) -> Self {
        Self { h, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Transformer(TransformerEncoder),
    Gru(GruEncoder),
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Transformer => Encoder::Transformer(TransformerEncoder::new(store, prefix, cfg, rng)?),
            EncoderKind::Gru => Encoder::Gru(GruEncoder::new(store, prefix, cfg, rng)?),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            Encoder::Transformer(e) => &e.cfg,
            Encoder::Gru(e) => &e.cfg,
        }
    }

    /// `table` is the shared item-embedding leaf, `[num_items + 2, dim]`.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        table: Var,
        batch: &IdBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<HiddenStates> {
        if batch.maxlen != self.config().maxlen && matches!(self, Encoder::Transformer(_)) {
            return Err(Error::shape(
                "transformer_forward",
                format!("batch maxlen {} vs positional table {}", batch.maxlen, self.config().maxlen),
            ));
        }
        let h = match self {
            Encoder::Transformer(e) => e.forward(tape, params, table, batch, ctx)?,
            Encoder::Gru(e) => e.forward(tape, params, table, batch)?,
        };
        Ok(HiddenStates {
            h,
            batch: batch.batch,
            maxlen: batch.maxlen,
            dim: self.config().dim,
            lengths: batch.lengths.clone(),
        })
    }
}

pub(crate) fn init_param<T: Real>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
    std: f64,
    rng: &mut RngStream,
) -> Result<crate::tensor::ParamId> {
    let value = if std == 0.0 {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, std, rng)
    };
    store.insert(name, value, true)
}

pub(crate) fn ones_param<T: Real>(store: &mut ParamStore<T>, name: String, dim: usize) -> Result<crate::tensor::ParamId> {
    store.insert(name, Tensor::new(vec![dim], vec![T::one(); dim])?, true)
}

/// `x · w + b` over the last dimension.
pub(crate) fn linear<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_broadcast(y, b),
        None => Ok(y),
    }
}

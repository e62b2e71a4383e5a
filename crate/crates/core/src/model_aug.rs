//! Model-level augmentation: neuron masking inside FFN layers, a
//! post-encoder FFN stack with random layer dropping, and a frozen
//! complementary encoder added to one contrastive branch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;

use crate::encoders::{init_param, linear, EncoderConfig, EncoderKind, ForwardCtx, HiddenStates, IdBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqModel};
use crate::tensor::{Bound, Checkpoint, ParamId, ParamStore, Real, RngStream, Tape, Tensor, Var};

pub const MAX_STACK_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComplementKind {
    None,
    Transformer1,
    Gru,
}

impl ComplementKind {
    pub const ALL: [ComplementKind; 3] = [ComplementKind::None, ComplementKind::Transformer1, ComplementKind::Gru];

    pub fn name(self) -> &'static str {
        match self {
            ComplementKind::None => "none",
            ComplementKind::Transformer1 => "transformer-1-layer",
            ComplementKind::Gru => "gru",
        }
    }

    /// Encoder settings for the complement: one layer of the chosen kind,
    /// sharing width, heads and window with the main encoder.
    pub fn encoder_config(self, main: &EncoderConfig) -> Option<EncoderConfig> {
        let kind = match self {
            ComplementKind::None => return None,
            ComplementKind::Transformer1 => EncoderKind::Transformer,
            ComplementKind::Gru => EncoderKind::Gru,
        };
        Some(EncoderConfig {
            kind,
            layers: 1,
            ..main.clone()
        })
    }
}

impl fmt::Display for ComplementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComplementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComplementKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown complement encoder `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAugConfig {
    pub neuron_p: f64,
    pub stack_k: usize,
    pub layer_drop_m: usize,
    pub gamma: f64,
    pub complement: ComplementKind,
}

impl Default for ModelAugConfig {
    fn default() -> Self {
        Self {
            neuron_p: 0.3,
            stack_k: 2,
            layer_drop_m: 1,
            gamma: 0.1,
            complement: ComplementKind::None,
        }
    }
}

impl ModelAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.neuron_p) {
            return Err(Error::InvalidArgument(format!("neuron mask p = {} not in [0, 1)", self.neuron_p)));
        }
        if !(1..=MAX_STACK_LAYERS).contains(&self.stack_k) {
            return Err(Error::InvalidArgument(format!(
                "stack K = {} not in 1..={MAX_STACK_LAYERS}",
                self.stack_k
            )));
        }
        if self.layer_drop_m >= self.stack_k {
            return Err(Error::InvalidArgument(format!(
                "layer drop M = {} must be below K = {}",
                self.layer_drop_m, self.stack_k
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma = {} must be finite and >= 0", self.gamma)));
        }
        Ok(())
    }

    pub fn complement_active(&self) -> bool {
        self.complement != ComplementKind::None && self.gamma > 0.0
    }
}

#[derive(Debug, Clone)]
struct FfnLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// `K` residual FFN layers (`d -> 4d -> d`, GELU) after the encoder.
#[derive(Debug, Clone)]
pub struct FfnStack {
    layers: Vec<FfnLayer>,
}

impl FfnStack {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let layers = (0..k)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                Ok(FfnLayer {
                    w1: init_param(store, format!("{p}.w1"), &[dim, 4 * dim], std, rng)?,
                    b1: init_param(store, format!("{p}.b1"), &[4 * dim], 0.0, rng)?,
                    w2: init_param(store, format!("{p}.w2"), &[4 * dim, dim], 0.5 / (dim as f64).sqrt(), rng)?,
                    b2: init_param(store, format!("{p}.b2"), &[dim], 0.0, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w1, l.b1, l.w2, l.b2]).collect()
    }

    /// Apply the stack. In training `ctx.layer_drop` layers, chosen
    /// uniformly, are skipped; eval applies all of them. Returns the applied
    /// layer indices alongside the new states.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        hidden: HiddenStates,
        keep: &[T],
        ctx: &mut ForwardCtx,
    ) -> Result<(HiddenStates, Vec<usize>)> {
        let k = self.layers.len();
        let drop = if ctx.training { ctx.layer_drop } else { 0 };
        if drop > 0 && drop >= k {
            return Err(Error::InvalidArgument(format!("layer drop M = {drop} must be below K = {k}")));
        }
        let mut skip = vec![false; k];
        if drop > 0 {
            for i in index::sample(&mut ctx.layer_rng, k, drop) {
                skip[i] = true;
            }
        }
        let applied: Vec<usize> = (0..k).filter(|&i| !skip[i]).collect();
        if applied.is_empty() {
            return Ok((hidden, applied));
        }
        let mut x = hidden.h;
        for &i in &applied {
            let l = &self.layers[i];
            let p = |id| params.var(id);
            let hid = tape.gelu(linear(tape, x, p(l.w1), Some(p(l.b1)))?);
            let hid = tape.dropout(hid, ctx.neuron_p, &mut ctx.neuron_rng, ctx.training)?;
            x = tape.add(x, linear(tape, hid, p(l.w2), Some(p(l.b2)))?)?;
        }
        let x = tape.scale_rows(x, keep.to_vec())?;
        Ok((hidden.with_h(x), applied))
    }
}

/// A pre-trained encoder whose parameters are frozen.
#[derive(Debug, Clone)]
pub struct ComplementEncoder {
    pub kind: ComplementKind,
    pub model: SeqModel,
    pub store: ParamStore<f32>,
}

pub const COMPLEMENT_PREFIX: &str = "comp";

impl ComplementEncoder {
    pub fn model_config(kind: ComplementKind, main: &ModelConfig) -> Option<ModelConfig> {
        kind.encoder_config(&main.encoder).map(|encoder| ModelConfig {
            num_items: main.num_items,
            encoder,
            stack_layers: 0,
        })
    }

    /// Freeze an already trained model.
    pub fn from_trained(kind: ComplementKind, model: SeqModel, mut store: ParamStore<f32>) -> Self {
        store.freeze_all();
        Self { kind, model, store }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(&self.store, true).save(path)
    }

    pub fn load(path: &Path, kind: ComplementKind, main: &ModelConfig) -> Result<Self> {
        let cfg = Self::model_config(kind, main)
            .ok_or_else(|| Error::InvalidArgument("cannot load a complement of kind `none`".into()))?;
        let mut store = ParamStore::new();
        let model = SeqModel::new(&mut store, COMPLEMENT_PREFIX, &cfg, 0)?;
        let ckpt = Checkpoint::load(path)?;
        if !ckpt.frozen {
            return Err(Error::Checkpoint(format!("{} is not marked frozen", path.display())));
        }
        ckpt.restore_into(&mut store)?;
        Ok(Self::from_trained(kind, model, store))
    }

    /// Eval-mode final-position embeddings, `[batch, dim]`.
    pub fn embed(&self, batch: &IdBatch) -> Result<Tensor<f32>> {
        self.model.embed(&self.store, batch)
    }
}

/// `z + γ · c` where `c` holds the complement's final-position embeddings.
/// The complement enters as a constant, so no gradient reaches it.
pub fn complement_embedding<T: Real>(tape: &Tape<T>, z: Var, comp: Option<&Tensor<f32>>, gamma: f64) -> Result<Var> {
    let Some(c) = comp else {
        return Ok(z);
    };
    if gamma == 0.0 {
        return Ok(z);
    }
    let zs = tape.shape(z);
    if zs != c.shape() {
        return Err(Error::shape("complement_embedding", format!("{zs:?} vs {:?}", c.shape())));
    }
    let scaled: Vec<T> = c.values().iter().map(|&v| T::of(gamma * v as f64)).collect();
    let cv = tape.constant(Tensor::new(zs, scaled)?);
    tape.add(z, cv)
}

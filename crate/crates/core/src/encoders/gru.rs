use super::{init_param, linear, EncoderConfig, IdBatch};
use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Real, RngStream, Tape, Var};

#[derive(Debug, Clone)]
struct Layer {
    /// Input weights for the update, reset and candidate gates, `[d, 3d]`.
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

/// Gated recurrent encoder. Pad positions carry the previous state forward,
/// so a left-padded prefix stays exactly zero.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    pub(super) cfg: EncoderConfig,
    layers: Vec<Layer>,
}

impl GruEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.gru{l}");
            layers.push(Layer {
                wx: init_param(store, format!("{p}.wx"), &[d, 3 * d], std, rng)?,
                bx: init_param(store, format!("{p}.bx"), &[3 * d], 0.0, rng)?,
                wh: init_param(store, format!("{p}.wh"), &[d, 3 * d], std, rng)?,
                bh: init_param(store, format!("{p}.bh"), &[3 * d], 0.0, rng)?,
            });
        }
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub(super) fn forward<T: Real>(&self, tape: &Tape<T>, params: &Bound, table: Var, batch: &IdBatch) -> Result<Var> {
        let (b, t, d) = (batch.batch, batch.maxlen, self.cfg.dim);
        let keep: Vec<T> = batch.keep_factors();
        let mut input = tape.embedding_lookup(table, &batch.ids)?;
        for layer in &self.layers {
            let p = |id| params.var(id);
            // input projections for every position at once, [b * t, 3d]
            let xp = linear(tape, input, p(layer.wx), Some(p(layer.bx)))?;
            let mut h = tape.constant(crate::tensor::Tensor::zeros(&[b, d]));
            let mut states = Vec::with_capacity(t);
            for step in 0..t {
                let rows: Vec<usize> = (0..b).map(|bi| bi * t + step).collect();
                let xs = tape.gather_rows(xp, &rows)?;
                let hs = linear(tape, h, p(layer.wh), Some(p(layer.bh)))?;
                let z = tape.sigmoid(tape.add(tape.slice_last(xs, 0, d)?, tape.slice_last(hs, 0, d)?)?);
                let r = tape.sigmoid(tape.add(tape.slice_last(xs, d, d)?, tape.slice_last(hs, d, d)?)?);
                let n = tape.tanh(tape.add(tape.slice_last(xs, 2 * d, d)?, tape.mul(r, tape.slice_last(hs, 2 * d, d)?)?)?);
                // h' = (1 - z) * n + z * h
                let next = tape.add(tape.mul(tape.affine(z, -T::one(), T::one()), n)?, tape.mul(z, h)?)?;
                let m: Vec<T> = rows.iter().map(|&r| keep[r]).collect();
                let hold: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
                h = tape.add(tape.scale_rows(next, m)?, tape.scale_rows(h, hold)?)?;
                states.push(h);
            }
            let stacked = tape.stack(&states)?;
            input = tape.reshape(stacked, &[b * t, d])?;
        }
        tape.reshape(input, &[b, t, d])
    }
}

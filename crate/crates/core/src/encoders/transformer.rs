use super::{init_param, linear, ones_param, EncoderConfig, ForwardCtx, IdBatch};
use crate::dataset::PAD_ID;
use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Real, RngStream, Tape, Var};

#[derive(Debug, Clone)]
struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Causal self-attention encoder with learned positions. Keys carry no bias:
/// it would shift every score in a row equally and cancel in the softmax.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub(super) cfg: EncoderConfig,
    pos: ParamId,
    ln0_g: ParamId,
    ln0_b: ParamId,
    blocks: Vec<Block>,
}

impl TransformerEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let pos = init_param(store, format!("{prefix}.pos"), &[cfg.maxlen, d], std, rng)?;
        let ln0_g = ones_param(store, format!("{prefix}.ln0.gain"), d)?;
        let ln0_b = init_param(store, format!("{prefix}.ln0.bias"), &[d], 0.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.block{l}");
            let mut w = |name: &str, shape: &[usize], std: f64| init_param(store, format!("{p}.{name}"), shape, std, rng);
            let wq = w("wq", &[d, d], std)?;
            let bq = w("bq", &[d], 0.0)?;
            let wk = w("wk", &[d, d], std)?;
            let wv = w("wv", &[d, d], std)?;
            let bv = w("bv", &[d], 0.0)?;
            let wo = w("wo", &[d, d], std)?;
            let bo = w("bo", &[d], 0.0)?;
            let w1 = w("ffn.w1", &[d, 4 * d], std)?;
            let b1 = w("ffn.b1", &[4 * d], 0.0)?;
            let w2 = w("ffn.w2", &[4 * d, d], 0.5 / (d as f64).sqrt())?;
            let b2 = w("ffn.b2", &[d], 0.0)?;
            let ln1_g = ones_param(store, format!("{p}.ln1.gain"), d)?;
            let ln1_b = init_param(store, format!("{p}.ln1.bias"), &[d], 0.0, rng)?;
            let ln2_g = ones_param(store, format!("{p}.ln2.gain"), d)?;
            let ln2_b = init_param(store, format!("{p}.ln2.bias"), &[d], 0.0, rng)?;
            blocks.push(Block {
                wq,
                bq,
                wk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            pos,
            ln0_g,
            ln0_b,
            blocks,
        })
    }

    pub(super) fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        table: Var,
        batch: &IdBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (b, t, d, heads) = (batch.batch, batch.maxlen, self.cfg.dim, self.cfg.heads);
        let dh = d / heads;
        let eps = T::of(self.cfg.ln_eps);
        let keep: Vec<T> = batch.keep_factors();

        let x = tape.embedding_lookup(table, &batch.ids)?;
        let x = tape.reshape(x, &[b, t, d])?;
        let x = tape.add_broadcast(x, params.var(self.pos))?;
        let x = tape.layer_norm(x, params.var(self.ln0_g), params.var(self.ln0_b), eps)?;
        let mut x = tape.scale_rows(x, keep.clone())?;

        // query i may attend key j when j <= i and j is a real item
        let mut allowed = Vec::with_capacity(b * heads * t * t);
        for bi in 0..b {
            let row = &batch.ids[bi * t..(bi + 1) * t];
            for _ in 0..heads {
                for i in 0..t {
                    allowed.extend((0..t).map(|j| j <= i && row[j] != PAD_ID));
                }
            }
        }
        let to_heads = |v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, heads, dh])?;
            let v = tape.swap_axes12(v)?;
            tape.reshape(v, &[b * heads, t, dh])
        };
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

        for blk in &self.blocks {
            let p = |id| params.var(id);
            let q = to_heads(linear(tape, x, p(blk.wq), Some(p(blk.bq)))?)?;
            let k = to_heads(linear(tape, x, p(blk.wk), None)?)?;
            let v = to_heads(linear(tape, x, p(blk.wv), Some(p(blk.bv)))?)?;
            let scores = tape.scale(tape.bmm(q, k, true)?, inv_sqrt);
            let attn = tape.masked_softmax_rows(scores, &allowed)?;
            let attn = tape.dropout(attn, ctx.attn_p, &mut ctx.attn_rng, ctx.training)?;
            let ctxv = tape.bmm(attn, v, false)?;
            let ctxv = tape.reshape(ctxv, &[b, heads, t, dh])?;
            let ctxv = tape.swap_axes12(ctxv)?;
            let ctxv = tape.reshape(ctxv, &[b, t, d])?;
            let out = linear(tape, ctxv, p(blk.wo), Some(p(blk.bo)))?;
            x = tape.layer_norm(tape.add(x, out)?, p(blk.ln1_g), p(blk.ln1_b), eps)?;

            let hid = tape.gelu(linear(tape, x, p(blk.w1), Some(p(blk.b1)))?);
            let hid = tape.dropout(hid, ctx.neuron_p, &mut ctx.neuron_rng, ctx.training)?;
            let ffn = linear(tape, hid, p(blk.w2), Some(p(blk.b2)))?;
            x = tape.layer_norm(tape.add(x, ffn)?, p(blk.ln2_g), p(blk.ln2_b), eps)?;
            x = tape.scale_rows(x, keep.clone())?;
        }
        Ok(x)
    }
}

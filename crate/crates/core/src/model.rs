//! Full sequence model: tied item embeddings, an encoder, and the
//! post-encoder FFN stack.

use crate::encoders::{init_param, Encoder, EncoderConfig, ForwardCtx, HiddenStates, IdBatch};
use crate::error::{Error, Result};
use crate::model_aug::FfnStack;
use crate::tensor::{Bound, ParamId, ParamStore, Real, RngStream, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_items: usize,
    pub encoder: EncoderConfig,
    /// Post-encoder FFN layers; zero for a bare encoder.
    pub stack_layers: usize,
}

#[derive(Debug, Clone)]
pub struct SeqModel {
    cfg: ModelConfig,
    item_emb: ParamId,
    encoder: Encoder,
    stack: FfnStack,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub hidden: HiddenStates,
    /// Stack layers applied on this forward, in order.
    pub applied_layers: Vec<usize>,
}

impl SeqModel {
    /// Register every parameter under `prefix` and draw initial values from
    /// the `init/{prefix}` stream of `seed`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_items == 0 {
            return Err(Error::InvalidArgument("model needs at least one item".into()));
        }
        let mut rng = RngStream::new(seed, format!("init/{prefix}"));
        let d = cfg.encoder.dim;
        let item_emb = init_param(store, format!("{prefix}.item_emb"), &[cfg.num_items + 2, d], 1.0 / (d as f64).sqrt(), &mut rng)?;
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), &cfg.encoder, &mut rng)?;
        let stack = FfnStack::new(store, &format!("{prefix}.stack"), d, cfg.stack_layers, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            item_emb,
            encoder,
            stack,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn item_table(&self) -> ParamId {
        self.item_emb
    }

    pub fn mask_id(&self) -> usize {
        self.cfg.num_items + 1
    }

    pub fn stack(&self) -> &FfnStack {
        &self.stack
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, params: &Bound, batch: &IdBatch, ctx: &mut ForwardCtx) -> Result<ModelOutput> {
        if let Some(&bad) = batch.ids.iter().find(|&&v| v > self.cfg.num_items + 1) {
            return Err(Error::IdOutOfRange {
                id: bad,
                rows: self.cfg.num_items + 2,
            });
        }
        let hidden = self.encoder.forward(tape, params, params.var(self.item_emb), batch, ctx)?;
        let (hidden, applied_layers) = self.stack.forward(tape, params, hidden, &batch.keep_factors(), ctx)?;
        Ok(ModelOutput { hidden, applied_layers })
    }

    /// Eval-mode final-position embeddings `[batch, dim]` computed on a
    /// private tape.
    pub fn embed<T: Real>(&self, store: &ParamStore<T>, batch: &IdBatch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = self.forward(&tape, &bound, batch, &mut ForwardCtx::eval())?;
        let z = out.hidden.last_hidden(&tape)?;
        tape.check_finite()?;
        let v = tape.value(z).clone();
        Ok(v)
    }

    /// Dot-product scores of each row of `z` (`[B, d]`) against every row of
    /// the item table, `[B, num_items + 2]`.
    pub fn score_all<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Tensor<T> {
        let table = store.value(self.item_emb);
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        let b = z.numel() / d;
        let mut out = vec![T::zero(); b * rows];
        T::gemm(b, d, rows, z.values(), (d as isize, 1), table.values(), (1, d as isize), T::zero(), &mut out, (rows as isize, 1));
        Tensor::new(vec![b, rows], out).expect("score shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::tensor::grad_check_params;

    fn cfg(kind: EncoderKind, maxlen: usize) -> ModelConfig {
        ModelConfig {
            num_items: 9,
            encoder: EncoderConfig {
                kind,
                layers: 2,
                dim: 8,
                heads: 2,
                maxlen,
                ln_eps: 1e-5,
            },
            stack_layers: 0,
        }
    }

    fn hidden_rows(model: &SeqModel, store: &ParamStore<f64>, batch: &IdBatch) -> Vec<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = model.forward(&tape, &bound, batch, &mut ForwardCtx::eval()).unwrap();
        let v = tape.value(out.hidden.h).values().to_vec();
        v
    }

    #[test]
    fn output_shape_and_determinism() {
        for kind in [EncoderKind::Transformer, EncoderKind::Gru] {
            let mut store = ParamStore::<f64>::new();
            let m = SeqModel::new(&mut store, "m", &cfg(kind, 5), 1).unwrap();
            let batch = IdBatch::new(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8, 9]], 5);
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let out = m.forward(&tape, &bound, &batch, &mut ForwardCtx::eval()).unwrap();
            assert_eq!(tape.shape(out.hidden.h), vec![2, 5, 8]);
            assert_eq!(hidden_rows(&m, &store, &batch), hidden_rows(&m, &store, &batch));
        }
    }

    #[test]
    fn causality() {
        for kind in [EncoderKind::Transformer, EncoderKind::Gru] {
            let mut store = ParamStore::<f64>::new();
            let m = SeqModel::new(&mut store, "m", &cfg(kind, 5), 2).unwrap();
            let a = hidden_rows(&m, &store, &IdBatch::new(&[vec![1, 2, 3, 4, 5]], 5));
            let b = hidden_rows(&m, &store, &IdBatch::new(&[vec![1, 2, 3, 9, 9]], 5));
            assert_eq!(&a[..3 * 8], &b[..3 * 8], "{kind}");
            assert_ne!(&a[3 * 8..], &b[3 * 8..]);
        }
    }

    #[test]
    fn pad_rows_are_zero() {
        for kind in [EncoderKind::Transformer, EncoderKind::Gru] {
            let mut store = ParamStore::<f64>::new();
            let m = SeqModel::new(&mut store, "m", &cfg(kind, 4), 3).unwrap();
            let h = hidden_rows(&m, &store, &IdBatch::new(&[vec![5, 6]], 4));
            assert!(h[..16].iter().all(|&v| v == 0.0));
            let h = hidden_rows(&m, &store, &IdBatch::new(&[Vec::<usize>::new()], 4));
            assert!(h.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gru_left_padding_invariance() {
        let mut store = ParamStore::<f64>::new();
        let m = SeqModel::new(&mut store, "m", &cfg(EncoderKind::Gru, 4), 4).unwrap();
        let z4 = m.embed(&store, &IdBatch::new(&[vec![1, 2]], 4)).unwrap();
        let z3 = m.embed(&store, &IdBatch::new(&[vec![1, 2]], 3)).unwrap();
        assert_eq!(z4.values(), z3.values());
    }

    #[test]
    fn last_hidden_reads_final_row() {
        let mut store = ParamStore::<f64>::new();
        let m = SeqModel::new(&mut store, "m", &cfg(EncoderKind::Transformer, 1), 5).unwrap();
        let batch = IdBatch::new(&[vec![3]], 1);
        assert_eq!(m.embed(&store, &batch).unwrap().values(), &hidden_rows(&m, &store, &batch)[..]);
        let empty = IdBatch::new(&[Vec::<usize>::new()], 1);
        assert!(m.embed(&store, &empty).is_err());
    }

    #[test]
    fn last_item_changes_embedding() {
        for kind in [EncoderKind::Transformer, EncoderKind::Gru] {
            for seed in 0..5 {
                let mut store = ParamStore::<f64>::new();
                let m = SeqModel::new(&mut store, "m", &cfg(kind, 4), seed).unwrap();
                let a = m.embed(&store, &IdBatch::new(&[vec![1, 2, 3]], 4)).unwrap();
                let b = m.embed(&store, &IdBatch::new(&[vec![1, 2, 4]], 4)).unwrap();
                assert_ne!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn invalid_id_rejected() {
        let mut store = ParamStore::<f64>::new();
        let m = SeqModel::new(&mut store, "m", &cfg(EncoderKind::Gru, 3), 0).unwrap();
        assert!(m.embed(&store, &IdBatch::new(&[vec![11]], 3)).is_err());
    }

    #[test]
    fn gru_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(EncoderKind::Gru, 3);
        c.encoder.dim = 4;
        c.encoder.layers = 1;
        let m = SeqModel::new(&mut store, "m", &c, 7).unwrap();
        let batch = IdBatch::new(&[vec![1, 2, 3]], 3);
        let weights = Tensor::randn(&[1, 3, 4], 1.0, &mut RngStream::new(7, "probe"));
        let err = grad_check_params(
            |tape, bound| {
                let out = m.forward(tape, bound, &batch, &mut ForwardCtx::eval())?;
                let w = tape.constant(weights.clone());
                Ok(tape.sum(tape.mul(out.hidden.h, w)?))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "gru rel err {err}");
    }

    #[test]
    fn score_all_matches_dot_products() {
        let mut store = ParamStore::<f64>::new();
        let m = SeqModel::new(&mut store, "m", &cfg(EncoderKind::Gru, 3), 0).unwrap();
        let z = Tensor::randn(&[2, 8], 1.0, &mut RngStream::new(1, "z"));
        let s = m.score_all(&store, &z);
        let table = store.value(m.item_table());
        for b in 0..2 {
            for v in 0..11 {
                let dot: f64 = z.row(b).iter().zip(table.row(v)).map(|(a, c)| a * c).sum();
                assert!((s.values()[b * 11 + v] - dot).abs() < 1e-12);
            }
        }
    }
}

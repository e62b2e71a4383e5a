//! Joint training: two augmented view-forwards feed InfoNCE, a third forward
//! over the raw training prefix feeds the next-item loss.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{random_augment, AugmentConfig, ItemCorrelation};
use crate::dataset::{pad_truncate, sample_negatives, Split, SplitDataset, PAD_ID};
use crate::encoders::{EncoderConfig, ForwardCtx, IdBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::losses::{joint_loss, joint_loss_var, pair_views, rec_loss, LossReport};
use crate::model::{ModelConfig, SeqModel};
use crate::model_aug::{complement_embedding, ComplementEncoder, ComplementKind, ModelAugConfig, COMPLEMENT_PREFIX};
use crate::tensor::{adam_step, AdamConfig, AdamState, Checkpoint, ParamStore, RngStream, Tape, Tensor};

pub const MODEL_PREFIX: &str = "model";
pub const STATE_CKPT: &str = "state.ckpt";
pub const STATE_JSON: &str = "state.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_rec + λ·L_ssl`.
    Joint,
    /// `L_rec` alone; the view forwards are skipped entirely.
    Rec,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Joint => "joint",
            Objective::Rec => "rec",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Objective::Joint),
            "rec" => Ok(Objective::Rec),
            other => Err(Error::InvalidArgument(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub patience: usize,
    pub clip_norm: f64,
    pub negatives: usize,
    pub objective: Objective,
    pub attn_p: f64,
    /// Neuron masking on the next-item forward.
    pub rec_neuron_mask: bool,
    /// Layer dropping on the next-item forward.
    pub rec_layer_drop: bool,
    pub eval_batch: usize,
    /// Epochs used when the complement has to be pre-trained in-process.
    pub complement_epochs: usize,
    pub encoder: EncoderConfig,
    pub aug: AugmentConfig,
    pub model_aug: ModelAugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            lambda: 0.1,
            seed: 0,
            patience: 10,
            clip_norm: 5.0,
            negatives: 1,
            objective: Objective::Joint,
            attn_p: 0.0,
            rec_neuron_mask: true,
            rec_layer_drop: false,
            eval_batch: 256,
            complement_epochs: 10,
            encoder: EncoderConfig::default(),
            aug: AugmentConfig::default(),
            model_aug: ModelAugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.eval_batch == 0 {
            return bad("epochs, batch size, patience and eval batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.attn_p) {
            return bad(format!("attention dropout {} not in [0, 1)", self.attn_p));
        }
        self.encoder.validate()?;
        self.aug.validate()?;
        self.model_aug.validate()
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            num_items,
            encoder: self.encoder.clone(),
            stack_layers: self.model_aug.stack_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_ssl: f64,
    pub loss: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub hr20: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    pub split: SplitName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Valid,
    Test,
}

impl From<Split> for SplitName {
    fn from(s: Split) -> Self {
        match s {
            Split::Valid => SplitName::Valid,
            Split::Test => SplitName::Test,
        }
    }
}

impl EpochRecord {
    pub fn new(epoch: usize, loss: LossReport, m: &Metrics, split: Split) -> Self {
        Self {
            epoch,
            loss_rec: loss.rec,
            loss_ssl: loss.ssl,
            loss: loss.total,
            hr5: m.hr5,
            hr10: m.hr10,
            hr20: m.hr20,
            ndcg5: m.ndcg5,
            ndcg10: m.ndcg10,
            ndcg20: m.ndcg20,
            split: split.into(),
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            hr5: self.hr5,
            hr10: self.hr10,
            hr20: self.hr20,
            ndcg5: self.ndcg5,
            ndcg10: self.ndcg10,
            ndcg20: self.ndcg20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub ndcg10: f64,
}

/// Progress persisted after every epoch so a run can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    next_epoch: usize,
    adam_step: u64,
    best: Option<BestRecord>,
    bad_epochs: usize,
    stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub records: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
}

/// Users whose training prefix has at least one next-item target.
pub fn trainable_users(ds: &SplitDataset) -> Vec<usize> {
    (0..ds.num_users()).filter(|&u| ds.split(u).train.len() >= 2).collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SeqModel,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub complement: Option<ComplementEncoder>,
    corr: Option<ItemCorrelation>,
    epoch: usize,
    best: Option<BestRecord>,
    bad_epochs: usize,
    stopped: bool,
    best_params: Option<Checkpoint>,
}

impl Trainer {
    /// Fresh trainer for the main model. A complement is required exactly
    /// when the config enables one.
    pub fn new(ds: &SplitDataset, cfg: &TrainConfig, complement: Option<ComplementEncoder>) -> Result<Self> {
        cfg.validate()?;
        let active = cfg.model_aug.complement_active() && cfg.objective == Objective::Joint;
        let complement = match (active, complement) {
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "complement `{}` is enabled but no pre-trained encoder was given",
                    cfg.model_aug.complement
                )))
            }
            (true, Some(c)) if c.kind != cfg.model_aug.complement => {
                return Err(Error::InvalidArgument(format!(
                    "complement kind {} does not match config {}",
                    c.kind, cfg.model_aug.complement
                )))
            }
            (true, c) => c,
            (false, _) => None,
        };
        Self::build(ds, cfg, cfg.model_config(ds.num_items()), MODEL_PREFIX, complement)
    }

    fn build(
        ds: &SplitDataset,
        cfg: &TrainConfig,
        model_cfg: ModelConfig,
        prefix: &str,
        complement: Option<ComplementEncoder>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = SeqModel::new(&mut store, prefix, &model_cfg, cfg.seed)?;
        let adam = AdamState::new(
            &store,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        let corr = cfg.aug.needs_correlation().then(|| {
            ItemCorrelation::build((0..ds.num_users()).map(|u| ds.split(u).train), ds.num_items())
        });
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            adam,
            complement,
            corr,
            epoch: 0,
            best: None,
            bad_epochs: 0,
            stopped: false,
            best_params: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<BestRecord> {
        self.best
    }

    fn joint(&self) -> bool {
        self.cfg.objective == Objective::Joint
    }

    /// One optimizer step over the sequences of `users`.
    pub fn train_step(&mut self, ds: &SplitDataset, users: &[usize], epoch: usize, batch: usize) -> Result<LossReport> {
        if users.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let cfg = &self.cfg;
        let maxlen = cfg.encoder.maxlen;
        let step = format!("e{epoch}/b{batch}");
        let prefixes: Vec<&[usize]> = users.iter().map(|&u| ds.split(u).train).collect();

        // next-item inputs and aligned targets over the raw prefix
        let inputs: Vec<&[usize]> = prefixes.iter().map(|p| &p[..p.len() - 1]).collect();
        let rec_batch = IdBatch::new(&inputs, maxlen);
        let mut targets = Vec::with_capacity(users.len() * maxlen);
        let mut negatives = Vec::new();
        let mut neg_rng = RngStream::new(cfg.seed, format!("negatives/{step}"));
        for p in &prefixes {
            let (row, len) = pad_truncate(&p[1..], maxlen, PAD_ID);
            targets.extend(row);
            negatives.extend(sample_negatives(&mut neg_rng, p, ds.num_items(), len * cfg.negatives)?);
        }

        let tape = Tape::<f32>::new();
        let bound = self.store.bind(&tape);
        let p = cfg.model_aug.neuron_p;
        let m = cfg.model_aug.layer_drop_m;

        let mut rec_ctx = ForwardCtx::train(
            cfg.seed,
            "rec",
            &step,
            if cfg.rec_neuron_mask { p } else { 0.0 },
            cfg.attn_p,
            if cfg.rec_layer_drop { m } else { 0 },
        );
        let rec_out = self.model.forward(&tape, &bound, &rec_batch, &mut rec_ctx)?;
        let table = bound.var(self.model.item_table());
        let rec = rec_loss(&tape, &rec_out.hidden, &targets, &negatives, cfg.negatives, table)?;

        let (loss, ssl) = if self.joint() {
            let (view1, view2) = if cfg.aug.enabled {
                let mut aug_rng = RngStream::new(cfg.seed, format!("data-aug/{step}"));
                let mask_id = self.model.mask_id();
                let mut v1 = Vec::with_capacity(users.len());
                let mut v2 = Vec::with_capacity(users.len());
                for p in &prefixes {
                    v1.push(random_augment(p, &cfg.aug, mask_id, self.corr.as_ref(), &mut aug_rng)?.1);
                    v2.push(random_augment(p, &cfg.aug, mask_id, self.corr.as_ref(), &mut aug_rng)?.1);
                }
                (IdBatch::new(&v1, maxlen), IdBatch::new(&v2, maxlen))
            } else {
                (IdBatch::new(&prefixes, maxlen), IdBatch::new(&prefixes, maxlen))
            };
            let mut ctx1 = ForwardCtx::train(cfg.seed, "view1", &step, p, cfg.attn_p, m);
            let mut ctx2 = ForwardCtx::train(cfg.seed, "view2", &step, p, cfg.attn_p, m);
            let z1 = self.model.forward(&tape, &bound, &view1, &mut ctx1)?.hidden.last_hidden(&tape)?;
            let z2 = self.model.forward(&tape, &bound, &view2, &mut ctx2)?.hidden.last_hidden(&tape)?;
            let comp = match &self.complement {
                Some(c) => Some(c.embed(&view2)?),
                None => None,
            };
            let z2 = complement_embedding(&tape, z2, comp.as_ref(), cfg.model_aug.gamma)?;
            let ssl = tape.info_nce(pair_views(&tape, z1, z2)?)?;
            (joint_loss_var(&tape, rec, ssl, cfg.lambda)?, Some(ssl))
        } else {
            (rec, None)
        };

        let rec_v = tape.scalar(rec) as f64;
        let ssl_v = ssl.map(|s| tape.scalar(s) as f64).unwrap_or(0.0);
        let lambda = if self.joint() { cfg.lambda } else { 0.0 };
        let report = LossReport {
            rec: rec_v,
            ssl: ssl_v,
            lambda,
            total: tape.scalar(loss) as f64,
        };
        if tape.check_finite().is_err() || !report.total.is_finite() {
            let lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                dump: format!("users={users:?} prefix_lengths={lengths:?} rec={rec_v} ssl={ssl_v}"),
            });
        }
        let grads = tape.backward(loss)?;
        self.store.accumulate(&bound, &grads);
        self.store.clip_grad_norm(self.cfg.clip_norm);
        adam_step(&mut self.store, &mut self.adam)?;
        Ok(report)
    }

    /// One pass over shuffled batches of `users`; returns the mean losses.
    pub fn train_epoch(&mut self, ds: &SplitDataset, users: &[usize], epoch: usize) -> Result<LossReport> {
        let mut order = users.to_vec();
        order.shuffle(&mut RngStream::new(self.cfg.seed, format!("shuffle/e{epoch}")));
        let mut sums = (0.0, 0.0);
        let mut n = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let r = self.train_step(ds, chunk, epoch, b)?;
            sums.0 += r.rec;
            sums.1 += r.ssl;
            n += 1;
        }
        let lambda = if self.joint() { self.cfg.lambda } else { 0.0 };
        Ok(joint_loss(sums.0 / n as f64, sums.1 / n as f64, lambda))
    }

    pub fn evaluate(&self, ds: &SplitDataset, split: Split) -> Result<Metrics> {
        evaluate(&self.model, &self.store, ds, split, self.cfg.eval_batch)
    }

    /// Train until the epoch budget or patience runs out, evaluating on the
    /// validation split after every epoch. With `out`, per-epoch state,
    /// the best checkpoint and `metrics.jsonl` are written there. On return
    /// the store holds the best-validation parameters.
    pub fn fit(&mut self, ds: &SplitDataset, out: Option<&Path>) -> Result<FitSummary> {
        let users = trainable_users(ds);
        if users.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut records = Vec::new();
        while !self.stopped && self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let loss = self.train_epoch(ds, &users, epoch)?;
            let m = self.evaluate(ds, Split::Valid)?;
            let rec = EpochRecord::new(epoch + 1, loss, &m, Split::Valid);
            if self.best.is_none_or(|b| m.ndcg10 > b.ndcg10) {
                self.best = Some(BestRecord {
                    epoch: epoch + 1,
                    ndcg10: m.ndcg10,
                });
                self.bad_epochs = 0;
                let ck = Checkpoint::from_store(&self.store, false);
                if let Some(dir) = out {
                    ck.save(&dir.join(BEST_CKPT))?;
                }
                self.best_params = Some(ck);
            } else {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.cfg.patience {
                    self.stopped = true;
                }
            }
            self.epoch += 1;
            if let Some(dir) = out {
                append_record(&dir.join(METRICS_FILE), &rec)?;
                self.save_state(dir)?;
            }
            records.push(rec);
        }
        self.restore_best(out)?;
        Ok(FitSummary { records, best: self.best })
    }

    fn restore_best(&mut self, out: Option<&Path>) -> Result<()> {
        if self.best_params.is_none() {
            if let Some(path) = out.map(|d| d.join(BEST_CKPT)).filter(|p| p.exists()) {
                self.best_params = Some(Checkpoint::load(&path)?);
            }
        }
        if let Some(ck) = &self.best_params {
            ck.restore_into(&mut self.store)?;
        }
        Ok(())
    }

    fn save_state(&self, dir: &Path) -> Result<()> {
        let mut ck = Checkpoint::from_store(&self.store, false);
        for id in self.store.ids() {
            let name = self.store.name(id);
            let shape = self.store.value(id).shape().to_vec();
            ck.tensors.push((format!("adam.m/{name}"), Tensor::new(shape.clone(), self.adam.m[id.index()].clone())?));
            ck.tensors.push((format!("adam.v/{name}"), Tensor::new(shape, self.adam.v[id.index()].clone())?));
        }
        ck.save(&dir.join(STATE_CKPT))?;
        let progress = Progress {
            next_epoch: self.epoch,
            adam_step: self.adam.step,
            best: self.best,
            bad_epochs: self.bad_epochs,
            stopped: self.stopped,
        };
        let path = dir.join(STATE_JSON);
        let body = serde_json::to_string_pretty(&progress).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a trainer from the state written by [`Trainer::fit`] into
    /// `dir`. `cfg` may raise the epoch budget.
    pub fn resume(ds: &SplitDataset, cfg: &TrainConfig, complement: Option<ComplementEncoder>, dir: &Path) -> Result<Self> {
        let mut t = Self::new(ds, cfg, complement)?;
        let path = dir.join(STATE_JSON);
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let progress: Progress = serde_json::from_str(&body).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck = Checkpoint::load(&dir.join(STATE_CKPT))?;
        ck.restore_into(&mut t.store)?;
        for id in t.store.ids().collect::<Vec<_>>() {
            let name = t.store.name(id).to_string();
            let get = |kind: &str| {
                ck.get(&format!("adam.{kind}/{name}"))
                    .map(|x| x.values().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{name}`")))
            };
            t.adam.m[id.index()] = get("m")?;
            t.adam.v[id.index()] = get("v")?;
        }
        t.adam.step = progress.adam_step;
        t.epoch = progress.next_epoch;
        t.best = progress.best;
        t.bad_epochs = progress.bad_epochs;
        t.stopped = progress.stopped;
        Ok(t)
    }
}

fn append_record(path: &Path, rec: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Train the complement encoder on the next-item loss alone (no
/// augmentation of any kind), then freeze it. Zero epochs yields a frozen
/// random initialization.
pub fn pretrain_complement(ds: &SplitDataset, kind: ComplementKind, base: &TrainConfig, epochs: usize) -> Result<ComplementEncoder> {
    let main = base.model_config(ds.num_items());
    let model_cfg = ComplementEncoder::model_config(kind, &main)
        .ok_or_else(|| Error::InvalidArgument("cannot pre-train a complement of kind `none`".into()))?;
    let cfg = TrainConfig {
        epochs: epochs.max(1),
        objective: Objective::Rec,
        attn_p: 0.0,
        rec_neuron_mask: false,
        rec_layer_drop: false,
        encoder: model_cfg.encoder.clone(),
        aug: AugmentConfig {
            enabled: false,
            ..base.aug.clone()
        },
        model_aug: ModelAugConfig {
            neuron_p: 0.0,
            layer_drop_m: 0,
            complement: ComplementKind::None,
            ..base.model_aug.clone()
        },
        ..base.clone()
    };
    cfg.validate()?;
    let mut t = Trainer::build(ds, &cfg, model_cfg, COMPLEMENT_PREFIX, None)?;
    if epochs > 0 {
        t.fit(ds, None)?;
    }
    Ok(ComplementEncoder::from_trained(kind, t.model, t.store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn data(seed: u64) -> SplitDataset {
        let syn = generate_synthetic(&SynthConfig {
            num_users: 120,
            num_items: 40,
            seq_len: 12,
            concentration: 0.05,
            seed,
        })
        .unwrap();
        SplitDataset::from_interactions(&syn.interactions, 5).unwrap().0
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            encoder: EncoderConfig {
                dim: 16,
                maxlen: 10,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_is_finite_and_deterministic() {
        let ds = data(1);
        let users: Vec<usize> = (0..16).collect();
        let run = || {
            let mut t = Trainer::new(&ds, &small_cfg(), None).unwrap();
            (0..3).map(|b| t.train_step(&ds, &users, 0, b).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|r| r.total.is_finite() && r.ssl > 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn one_epoch_one_record() {
        let ds = data(2);
        let mut t = Trainer::new(&ds, &TrainConfig { epochs: 1, ..small_cfg() }, None).unwrap();
        assert_eq!(t.fit(&ds, None).unwrap().records.len(), 1);
    }

    #[test]
    fn resume_reproduces_metrics() {
        let ds = data(3);
        let cfg = TrainConfig { epochs: 4, ..small_cfg() };
        let full_dir = tempfile::tempdir().unwrap();
        let full = Trainer::new(&ds, &cfg, None).unwrap().fit(&ds, Some(full_dir.path())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = Trainer::new(&ds, &TrainConfig { epochs: 2, ..cfg.clone() }, None)
            .unwrap()
            .fit(&ds, Some(dir.path()))
            .unwrap();
        let rest = Trainer::resume(&ds, &cfg, None, dir.path()).unwrap().fit(&ds, Some(dir.path())).unwrap();
        let joined: Vec<_> = first.records.into_iter().chain(rest.records).collect();
        assert_eq!(joined, full.records);
        assert_eq!(
            fs::read(dir.path().join(METRICS_FILE)).unwrap(),
            fs::read(full_dir.path().join(METRICS_FILE)).unwrap()
        );
    }

    #[test]
    fn missing_complement_is_rejected() {
        let ds = data(4);
        let cfg = TrainConfig {
            model_aug: ModelAugConfig {
                complement: ComplementKind::Gru,
                ..ModelAugConfig::default()
            },
            ..small_cfg()
        };
        assert!(Trainer::new(&ds, &cfg, None).is_err());
        let comp = pretrain_complement(&ds, ComplementKind::Gru, &cfg, 0).unwrap();
        assert!(Trainer::new(&ds, &cfg, Some(comp)).is_ok());
    }

    #[test]
    fn complement_params_stay_fixed() {
        let ds = data(5);
        let cfg = TrainConfig {
            epochs: 2,
            model_aug: ModelAugConfig {
                complement: ComplementKind::Transformer1,
                gamma: 0.5,
                ..ModelAugConfig::default()
            },
            ..small_cfg()
        };
        let comp = pretrain_complement(&ds, ComplementKind::Transformer1, &cfg, 1).unwrap();
        let before = Checkpoint::from_store(&comp.store, true).encode();
        let mut t = Trainer::new(&ds, &cfg, Some(comp)).unwrap();
        t.fit(&ds, None).unwrap();
        assert_eq!(Checkpoint::from_store(&t.complement.as_ref().unwrap().store, true).encode(), before);
    }

    #[test]
    fn untrained_model_is_near_random() {
        let mut hr = Vec::new();
        for seed in 0..5 {
            let syn = generate_synthetic(&SynthConfig {
                num_users: 500,
                num_items: 100,
                seq_len: 20,
                concentration: 0.05,
                seed,
            })
            .unwrap();
            let ds = SplitDataset::from_interactions(&syn.interactions, 5).unwrap().0;
            let cfg = TrainConfig {
                seed,
                encoder: EncoderConfig { dim: 32, maxlen: 20, ..EncoderConfig::default() },
                ..TrainConfig::default()
            };
            let t = Trainer::new(&ds, &cfg, None).unwrap();
            hr.push(t.evaluate(&ds, Split::Test).unwrap().hr10);
        }
        let mean = hr.iter().sum::<f64>() / hr.len() as f64;
        assert!((mean - 0.10).abs() <= 0.03, "{hr:?}");
    }
}

//! Flat `key = value` experiment configs.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use srma::augment::AugOp;
use srma::dataset::SynthConfig;
use srma::trainer::TrainConfig;

/// Name of the echoed effective config in every output directory.
pub const CONFIG_FILE: &str = "config.txt";

/// Every tunable of a run. `train.encoder.maxlen` is driven by `data.maxlen`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kcore: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kcore: 5,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| anyhow!("bad value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("bad value `{value}` for `{key}`: expected true or false"),
    }
}

fn parse_ops(value: &str) -> Result<Vec<AugOp>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<AugOp>().map_err(|e| anyhow!("bad value `{s}` for `aug.ops`: {e}")))
        .collect()
}

impl ExperimentConfig {
    /// Recognized keys, in echo order.
    pub const KEYS: [&'static str; 38] = [
        "data.kcore",
        "data.maxlen",
        "synth.users",
        "synth.items",
        "synth.length",
        "synth.concentration",
        "synth.seed",
        "encoder.kind",
        "encoder.layers",
        "encoder.dim",
        "encoder.heads",
        "encoder.ln_eps",
        "aug.enabled",
        "aug.ops",
        "aug.crop_ratio",
        "aug.mask_ratio",
        "aug.reorder_ratio",
        "aug.substitute_ratio",
        "aug.insert_ratio",
        "modelaug.p",
        "modelaug.K",
        "modelaug.M",
        "modelaug.gamma",
        "modelaug.complement",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "train.lambda",
        "train.seed",
        "train.patience",
        "train.clip_norm",
        "train.negatives",
        "train.objective",
        "train.attn_p",
        "train.rec_neuron_mask",
        "train.rec_layer_drop",
        "train.eval_batch",
        "train.complement_epochs",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "data.kcore" => self.kcore = parse(key, v)?,
            "data.maxlen" => t.encoder.maxlen = parse(key, v)?,
            "synth.users" => self.synth.num_users = parse(key, v)?,
            "synth.items" => self.synth.num_items = parse(key, v)?,
            "synth.length" => self.synth.seq_len = parse(key, v)?,
            "synth.concentration" => self.synth.concentration = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "encoder.kind" => t.encoder.kind = parse(key, v)?,
            "encoder.layers" => t.encoder.layers = parse(key, v)?,
            "encoder.dim" => t.encoder.dim = parse(key, v)?,
            "encoder.heads" => t.encoder.heads = parse(key, v)?,
            "encoder.ln_eps" => t.encoder.ln_eps = parse(key, v)?,
            "aug.enabled" => t.aug.enabled = parse_bool(key, v)?,
            "aug.ops" => t.aug.ops = parse_ops(v)?,
            "aug.crop_ratio" => t.aug.crop_ratio = parse(key, v)?,
            "aug.mask_ratio" => t.aug.mask_ratio = parse(key, v)?,
            "aug.reorder_ratio" => t.aug.reorder_ratio = parse(key, v)?,
            "aug.substitute_ratio" => t.aug.substitute_ratio = parse(key, v)?,
            "aug.insert_ratio" => t.aug.insert_ratio = parse(key, v)?,
            "modelaug.p" => t.model_aug.neuron_p = parse(key, v)?,
            "modelaug.K" => t.model_aug.stack_k = parse(key, v)?,
            "modelaug.M" => t.model_aug.layer_drop_m = parse(key, v)?,
            "modelaug.gamma" => t.model_aug.gamma = parse(key, v)?,
            "modelaug.complement" => t.model_aug.complement = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lambda" => t.lambda = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.negatives" => t.negatives = parse(key, v)?,
            "train.objective" => t.objective = parse(key, v)?,
            "train.attn_p" => t.attn_p = parse(key, v)?,
            "train.rec_neuron_mask" => t.rec_neuron_mask = parse_bool(key, v)?,
            "train.rec_layer_drop" => t.rec_layer_drop = parse_bool(key, v)?,
            "train.eval_batch" => t.eval_batch = parse(key, v)?,
            "train.complement_epochs" => t.complement_epochs = parse(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "data.kcore" => self.kcore.to_string(),
            "data.maxlen" => t.encoder.maxlen.to_string(),
            "synth.users" => self.synth.num_users.to_string(),
            "synth.items" => self.synth.num_items.to_string(),
            "synth.length" => self.synth.seq_len.to_string(),
            "synth.concentration" => self.synth.concentration.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            "encoder.kind" => t.encoder.kind.to_string(),
            "encoder.layers" => t.encoder.layers.to_string(),
            "encoder.dim" => t.encoder.dim.to_string(),
            "encoder.heads" => t.encoder.heads.to_string(),
            "encoder.ln_eps" => t.encoder.ln_eps.to_string(),
            "aug.enabled" => t.aug.enabled.to_string(),
            "aug.ops" => t.aug.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(","),
            "aug.crop_ratio" => t.aug.crop_ratio.to_string(),
            "aug.mask_ratio" => t.aug.mask_ratio.to_string(),
            "aug.reorder_ratio" => t.aug.reorder_ratio.to_string(),
            "aug.substitute_ratio" => t.aug.substitute_ratio.to_string(),
            "aug.insert_ratio" => t.aug.insert_ratio.to_string(),
            "modelaug.p" => t.model_aug.neuron_p.to_string(),
            "modelaug.K" => t.model_aug.stack_k.to_string(),
            "modelaug.M" => t.model_aug.layer_drop_m.to_string(),
            "modelaug.gamma" => t.model_aug.gamma.to_string(),
            "modelaug.complement" => t.model_aug.complement.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.negatives" => t.negatives.to_string(),
            "train.objective" => t.objective.to_string(),
            "train.attn_p" => t.attn_p.to_string(),
            "train.rec_neuron_mask" => t.rec_neuron_mask.to_string(),
            "train.rec_layer_drop" => t.rec_layer_drop.to_string(),
            "train.eval_batch" => t.eval_batch.to_string(),
            "train.complement_epochs" => t.complement_epochs.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// `key=value` command-line overrides.
    pub fn merge_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.merge_text(&text).with_context(|| format!("config {}", path.display()))?;
        }
        cfg.merge_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kcore == 0 {
            bail!("data.kcore must be at least 1");
        }
        let s = &self.synth;
        if s.num_users == 0 || s.num_items < 2 || s.seq_len < 3 {
            bail!("synth needs users >= 1, items >= 2 and length >= 3");
        }
        if !(s.concentration > 0.0 && s.concentration.is_finite()) {
            bail!("synth.concentration must be positive");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_text("train.lr = 0.003 # faster\n\naug.ops = crop, insert\nmodelaug.complement = gru\n").unwrap();
        let mut back = ExperimentConfig::default();
        back.merge_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.lr, 0.003);
        assert_eq!(back.train.aug.ops, vec![AugOp::Crop, AugOp::Insert]);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = ExperimentConfig::default();
        for k in ExperimentConfig::KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = ExperimentConfig::default();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        let e = cfg.merge_text("train.lr = 0.1\ntrain.colour = red\n").unwrap_err();
        assert!(format!("{e:#}").contains("line 2"), "{e:#}");
        assert!(cfg.set("train.epochs", "many").is_err());
        assert!(cfg.merge_text("no equals sign").is_err());
        assert!(cfg.set("aug.enabled", "maybe").is_err());
    }

    #[test]
    fn overrides_win_and_validation_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "train.epochs = 3\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &["train.epochs=7".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert!(ExperimentConfig::load(None, &["modelaug.M=2".into()]).is_err());
    }
}

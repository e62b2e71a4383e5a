//! Subcommand implementations behind the `srma` binary.

pub mod config;

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use srma::dataset::{generate_synthetic, parse_interactions, write_interactions, Split, SplitDataset};
use srma::eval::{evaluate, Metrics};
use srma::model::SeqModel;
use srma::model_aug::{ComplementEncoder, ComplementKind};
use srma::tensor::{Checkpoint, ParamStore};
use srma::trainer::{pretrain_complement, FitSummary, Objective, TrainConfig, Trainer, BEST_CKPT, METRICS_FILE, MODEL_PREFIX, STATE_CKPT, STATE_JSON};
use srma::verify::{check_composed, check_ops, CheckReport};

pub use config::ExperimentConfig;

pub const COMPLEMENT_CKPT: &str = "complement.ckpt";
pub const TEST_METRICS: &str = "test_metrics.json";

pub const OPS_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Four decimals, as in every table and CSV the runner prints.
pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Two-line table of the six metrics in fixed order.
pub fn metrics_table(m: &Metrics) -> String {
    let header = Metrics::HEADER.map(|h| format!("{h:>8}")).join(" ");
    let row = m.as_row().map(|v| format!("{:>8}", fmt4(v))).join(" ");
    format!("{header}\n{row}\n")
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let syn = generate_synthetic(&cfg.synth)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(f);
    write_interactions(&mut w, &syn.interactions)?;
    w.flush()?;
    Ok(syn.interactions.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareSummary {
    pub users: usize,
    pub items: usize,
}

/// k-core filter, re-index and split a TSV of interactions into `out`.
pub fn cmd_prepare(cfg: &ExperimentConfig, input: &Path, out: &Path) -> Result<PrepareSummary> {
    let f = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let inter = parse_interactions(BufReader::new(f)).with_context(|| format!("parsing {}", input.display()))?;
    let (ds, catalog) = SplitDataset::from_interactions(&inter, cfg.kcore)?;
    create_dir(out)?;
    ds.save(out, &catalog)?;
    cfg.write(out)?;
    Ok(PrepareSummary {
        users: ds.num_users(),
        items: ds.num_items(),
    })
}

pub fn load_data(dir: &Path) -> Result<SplitDataset> {
    SplitDataset::load(dir).with_context(|| format!("loading prepared data from {}", dir.display()))
}

/// Pre-train and freeze the complement named by `modelaug.complement`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    let kind = cfg.train.model_aug.complement;
    if kind == ComplementKind::None {
        bail!("modelaug.complement is `none`; nothing to pre-train");
    }
    let ds = load_data(data)?;
    let comp = pretrain_complement(&ds, kind, &cfg.train, cfg.train.complement_epochs)?;
    create_dir(out)?;
    let path = out.join(COMPLEMENT_CKPT);
    comp.save(&path)?;
    cfg.write(out)?;
    Ok(path)
}

fn complement_for(cfg: &TrainConfig, ds: &SplitDataset, path: Option<&Path>) -> Result<Option<ComplementEncoder>> {
    if !(cfg.model_aug.complement_active() && cfg.objective == Objective::Joint) {
        return Ok(None);
    }
    let kind = cfg.model_aug.complement;
    Ok(Some(match path {
        Some(p) => ComplementEncoder::load(p, kind, &cfg.model_config(ds.num_items()))
            .with_context(|| format!("loading complement {}", p.display()))?,
        None => pretrain_complement(ds, kind, cfg, cfg.complement_epochs)?,
    }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub fit: FitSummary,
    pub test: Metrics,
}

/// Train into `out`. Without `resume` any earlier run state there is
/// discarded first, so repeated invocations produce the same files.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, complement: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    let ds = load_data(data)?;
    create_dir(out)?;
    let resuming = resume && out.join(STATE_JSON).exists();
    if !resuming {
        for f in [METRICS_FILE, STATE_CKPT, STATE_JSON, BEST_CKPT, TEST_METRICS] {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    cfg.write(out)?;
    let comp = match complement_for(&cfg.train, &ds, complement)? {
        // keep the in-process complement next to the run for later reuse
        Some(c) if complement.is_none() => {
            c.save(&out.join(COMPLEMENT_CKPT))?;
            Some(c)
        }
        c => c,
    };
    let mut trainer = if resuming {
        Trainer::resume(&ds, &cfg.train, comp, out)?
    } else {
        Trainer::new(&ds, &cfg.train, comp)?
    };
    let fit = trainer.fit(&ds, Some(out))?;
    let test = trainer.evaluate(&ds, Split::Test)?;
    let body = serde_json::to_string_pretty(&test)?;
    fs::write(out.join(TEST_METRICS), body + "\n")?;
    Ok(TrainOutcome { fit, test })
}

/// Metrics of the checkpoint at `checkpoint`, or of a fresh initialization
/// from `train.seed` when none is given.
pub fn cmd_evaluate(cfg: &ExperimentConfig, data: &Path, checkpoint: Option<&Path>, split: Split) -> Result<Metrics> {
    let ds = load_data(data)?;
    let mut store = ParamStore::<f32>::new();
    let model = SeqModel::new(&mut store, MODEL_PREFIX, &cfg.train.model_config(ds.num_items()), cfg.train.seed)?;
    if let Some(p) = checkpoint {
        Checkpoint::load(p)
            .and_then(|ck| ck.restore_into(&mut store))
            .with_context(|| format!("loading checkpoint {}", p.display()))?;
    }
    Ok(evaluate(&model, &store, &ds, split, cfg.train.eval_batch)?)
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub ops: Vec<CheckReport>,
    pub composed: CheckReport,
}

impl GradcheckOutcome {
    pub fn max_ops_err(&self) -> f64 {
        self.ops.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_ops_err() <= OPS_TOLERANCE && self.composed.max_rel_err <= COMPOSED_TOLERANCE
    }

    pub fn summary(&self) -> String {
        format!(
            "{} max_rel_err={:.3e} composed_max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_ops_err(),
            self.composed.max_rel_err
        )
    }
}

pub fn cmd_gradcheck(seed: u64, cases: usize, composed_cases: usize) -> Result<GradcheckOutcome> {
    Ok(GradcheckOutcome {
        ops: check_ops(seed, cases)?,
        composed: check_composed(seed, composed_cases)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    P,
    KM,
    Gamma,
    Complement,
    Components,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::P, Axis::KM, Axis::Gamma, Axis::Complement, Axis::Components];

    pub fn name(self) -> &'static str {
        match self {
            Axis::P => "p",
            Axis::KM => "K_M",
            Axis::Gamma => "gamma",
            Axis::Complement => "complement",
            Axis::Components => "components",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown axis `{s}` (expected p, K_M, gamma, complement or components)"))
    }
}

pub const GAMMA_GRID: [f64; 6] = [0.005, 0.01, 0.05, 0.1, 0.5, 1.0];

/// Labeled training configs along `axis`, derived from `base`.
pub fn grid(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::P => (0..10)
            .map(|i| {
                let p = i as f64 / 10.0;
                (format!("p={p:.1}"), with(&|c| c.model_aug.neuron_p = p))
            })
            .collect(),
        Axis::KM => (1..=4)
            .flat_map(|k| (0..k).map(move |m| (k, m)))
            .map(|(k, m)| {
                let c = with(&|c| {
                    c.model_aug.stack_k = k;
                    c.model_aug.layer_drop_m = m;
                });
                (format!("K={k} M={m}"), c)
            })
            .collect(),
        Axis::Gamma => {
            let kind = match base.model_aug.complement {
                ComplementKind::None => ComplementKind::Transformer1,
                k => k,
            };
            GAMMA_GRID
                .iter()
                .map(|&g| {
                    let c = with(&|c| {
                        c.model_aug.gamma = g;
                        c.model_aug.complement = kind;
                    });
                    (format!("gamma={g}"), c)
                })
                .collect()
        }
        Axis::Complement => ComplementKind::ALL
            .iter()
            .map(|&k| (k.to_string(), with(&|c| c.model_aug.complement = k)))
            .collect(),
        Axis::Components => vec![
            ("full".to_string(), base.clone()),
            ("no-data-aug".to_string(), with(&|c| c.aug.enabled = false)),
            (
                "no-model-aug".to_string(),
                with(&|c| {
                    c.model_aug.neuron_p = 0.0;
                    c.model_aug.layer_drop_m = 0;
                    c.model_aug.complement = ComplementKind::None;
                }),
            ),
            ("rec-only".to_string(), with(&|c| c.objective = Objective::Rec)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub setting: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub mean: Metrics,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl Ablation {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    fn header(lead: &str) -> String {
        format!("{lead},{}\n", Metrics::HEADER.join(","))
    }

    /// One row per setting, metrics averaged over seeds.
    pub fn to_csv(&self) -> String {
        let mut s = Self::header("setting,seeds");
        for r in &self.rows {
            let vals = r.mean.as_row().map(fmt4).join(",");
            s.push_str(&format!("{},{},{vals}\n", r.setting, r.runs));
        }
        s
    }

    /// One row per (setting, seed).
    pub fn runs_csv(&self) -> String {
        let mut s = Self::header("setting,seed");
        for r in &self.runs {
            let vals = r.metrics.as_row().map(fmt4).join(",");
            s.push_str(&format!("{},{},{vals}\n", r.setting, r.seed));
        }
        s
    }
}

/// Train every setting of `axis` for `seeds` consecutive training seeds
/// starting at `train.seed`, evaluating the best-validation parameters on
/// the test split. Writes `{axis}.csv` and `{axis}_runs.csv` into `out`.
pub fn cmd_ablate(cfg: &ExperimentConfig, data: &Path, out: &Path, axis: Axis, seeds: usize) -> Result<Ablation> {
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let ds = load_data(data)?;
    let settings = grid(axis, &cfg.train);
    for (label, c) in &settings {
        c.validate().with_context(|| format!("setting {label}"))?;
    }
    create_dir(out)?;
    cfg.write(out)?;
    let mut complements: HashMap<(ComplementKind, u64), ComplementEncoder> = HashMap::new();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for (label, c) in &settings {
        let mut per_seed = Vec::new();
        for s in 0..seeds as u64 {
            let run_cfg = TrainConfig {
                seed: c.seed + s,
                ..c.clone()
            };
            let comp = if run_cfg.model_aug.complement_active() && run_cfg.objective == Objective::Joint {
                let kind = run_cfg.model_aug.complement;
                Some(match complements.entry((kind, run_cfg.seed)) {
                    Entry::Occupied(e) => e.get().clone(),
                    Entry::Vacant(e) => e.insert(pretrain_complement(&ds, kind, &run_cfg, run_cfg.complement_epochs)?).clone(),
                })
            } else {
                None
            };
            let mut t = Trainer::new(&ds, &run_cfg, comp).with_context(|| format!("setting {label}"))?;
            t.fit(&ds, None)?;
            let m = t.evaluate(&ds, Split::Test)?;
            per_seed.push(m);
            runs.push(AblationRun {
                setting: label.clone(),
                seed: run_cfg.seed,
                metrics: m,
            });
        }
        rows.push(AblationRow {
            setting: label.clone(),
            mean: Metrics::mean(&per_seed)?,
            runs: per_seed.len(),
        });
    }
    let table = Ablation { axis, rows, runs };
    fs::write(out.join(format!("{axis}.csv")), table.to_csv())?;
    fs::write(out.join(format!("{axis}_runs.csv")), table.runs_csv())?;
    Ok(table)
}

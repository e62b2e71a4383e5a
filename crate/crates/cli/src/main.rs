use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use srma::dataset::Split;
use srma_cli::config::CONFIG_FILE;
use srma_cli::{metrics_table, Axis, ExperimentConfig};

#[derive(Parser)]
#[command(name = "srma", version, about = "Contrastive sequential recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Markov interaction log as TSV
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Filter, index and split an interaction TSV
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train and freeze the complement encoder
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train with validation early stopping, then report test metrics
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frozen complement checkpoint; pre-trained in-process when absent
        #[arg(long)]
        complement: Option<PathBuf>,
        /// Continue from the state saved in `--out`
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank a split with a checkpoint (or a fresh initialization)
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 10)]
        composed_cases: usize,
    },
    /// Sweep one axis and write a CSV of mean test metrics
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Config for `evaluate`: explicit flags, else the config echoed next to the
/// checkpoint, else defaults.
fn evaluate_config(cfg: &ConfigArgs, checkpoint: Option<&Path>) -> Result<ExperimentConfig> {
    if cfg.config.is_some() {
        return cfg.load();
    }
    let beside = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.exists());
    ExperimentConfig::load(beside.as_deref(), &cfg.set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, cfg } => {
            let cfg = cfg.load()?;
            let n = srma_cli::cmd_synth(&cfg, &out)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                cfg.write(dir)?;
            }
            println!("wrote {n} interactions to {}", out.display());
        }
        Command::Prepare { input, out, cfg } => {
            let s = srma_cli::cmd_prepare(&cfg.load()?, &input, &out)?;
            println!("{} users, {} items -> {}", s.users, s.items, out.display());
        }
        Command::Pretrain { data, out, cfg } => {
            let path = srma_cli::cmd_pretrain(&cfg.load()?, &data, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            data,
            out,
            complement,
            resume,
            cfg,
        } => {
            let t0 = Instant::now();
            let r = srma_cli::cmd_train(&cfg.load()?, &data, &out, complement.as_deref(), resume)?;
            if let Some(b) = r.fit.best {
                println!("best epoch {} valid NDCG@10 {:.4}", b.epoch, b.ndcg10);
            }
            print!("{}", metrics_table(&r.test));
            eprintln!("{:.1}s", t0.elapsed().as_secs_f64());
        }
        Command::Evaluate {
            data,
            checkpoint,
            split,
            cfg,
        } => {
            let cfg = evaluate_config(&cfg, checkpoint.as_deref())?;
            let m = srma_cli::cmd_evaluate(&cfg, &data, checkpoint.as_deref(), split)?;
            print!("{}", metrics_table(&m));
        }
        Command::Gradcheck {
            seed,
            cases,
            composed_cases,
        } => {
            let r = srma_cli::cmd_gradcheck(seed, cases, composed_cases)?;
            for op in r.ops.iter().chain([&r.composed]) {
                println!("{:<24} cases={:<4} max_rel_err={:.3e}", op.name, op.cases, op.max_rel_err);
            }
            println!("{}", r.summary());
            if !r.passed() {
                bail!("gradient check failed: {}", r.summary());
            }
        }
        Command::Ablate {
            axis,
            data,
            out,
            seeds,
            cfg,
        } => {
            let table = srma_cli::cmd_ablate(&cfg.load()?, &data, &out, axis, seeds)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

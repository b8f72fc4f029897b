use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rapl_core::cluster::Protocol;
use rapl_core::encoder::{EncoderCheckpoint, CHECKPOINT_VERSION};
use rapl_core::pipeline::experiment::{write_losses, write_metrics, write_saliency};
use rapl_core::pipeline::{
    gradcheck_suite, mean_by_variant, run_ablation, run_experiment, run_to_dir, evaluate_protocol,
    ExperimentConfig, Phase, RunCheckpoint, RunOptions, StopPoint,
};
use rapl_core::synth::{generate, Dataset};

/// Region-aware proxy learning for novel class discovery on synthetic
/// ultra-fine-grained data.
#[derive(Parser)]
#[command(name = "rapl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, initialization and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to a file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on the labeled split only.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset written by `gen-data`; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Continue from a pre-training checkpoint through the discovery phase.
    Discover {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under both protocols.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also export the encoder weights alone.
        #[arg(long)]
        export_encoder: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and of the encoder.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the component-removal matrix over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Full experiment: pre-training, discovery and evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Halt after this many epochs of a phase, e.g. `discover:10`.
        #[arg(long, value_parser = parse_stop)]
        stop_after: Option<StopPoint>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

fn parse_stop(s: &str) -> std::result::Result<StopPoint, String> {
    let (phase, epoch) = s.split_once(':').ok_or("expected PHASE:EPOCH")?;
    let phase = match phase {
        "pretrain" => Phase::Pretrain,
        "discover" => Phase::Discover,
        other => return Err(format!("unknown phase {other}")),
    };
    let epoch = epoch.parse().map_err(|e| format!("bad epoch: {e}"))?;
    Ok(StopPoint { phase, epoch })
}

fn dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = Dataset::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ds.config != cfg.data {
                bail!("{} was generated with a different data config", p.display());
            }
            Ok(ds)
        }
        None => Ok(generate(&cfg.data)?),
    }
}

fn print_final(outcome: &rapl_core::pipeline::RunOutcome) {
    for r in &outcome.metrics {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<9} {:<14} epoch {:>3}  all {:.4}  old {}  new {}",
            r.phase.to_string(),
            r.protocol.to_string(),
            r.epoch,
            r.acc_all,
            fmt(r.acc_old),
            fmt(r.acc_new)
        );
    }
}

fn write_logs(dir: &Path, cfg: &ExperimentConfig, outcome: &rapl_core::pipeline::RunOutcome, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_metrics(dir, &outcome.metrics)?;
    write_losses(dir, &outcome.losses)?;
    if outcome.completed {
        write_saliency(dir, &outcome.state.encoder, ds, cfg)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let ds = generate(&cfg.data)?;
            ds.save(&out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Pretrain { common, out, data } => {
            let cfg = common.load()?;
            let ds = dataset(&cfg, data.as_deref())?;
            let outcome = run_experiment(
                &cfg,
                &ds,
                RunOptions {
                    out_dir: Some(out.clone()),
                    pretrain_only: true,
                    ..Default::default()
                },
            )?;
            write_logs(&out, &cfg, &outcome, &ds)?;
            print_final(&outcome);
        }
        Command::Discover { checkpoint, out, data } => {
            let ckpt = RunCheckpoint::load(&checkpoint)?;
            if ckpt.state.phase != Phase::Pretrain {
                bail!("{} is not a pre-training checkpoint", checkpoint.display());
            }
            let cfg = ckpt.config.clone();
            let ds = dataset(&cfg, data.as_deref())?;
            let outcome = run_experiment(
                &cfg,
                &ds,
                RunOptions {
                    out_dir: Some(out.clone()),
                    resume: Some(ckpt),
                    ..Default::default()
                },
            )?;
            write_logs(&out, &cfg, &outcome, &ds)?;
            print_final(&outcome);
        }
        Command::Evaluate {
            checkpoint,
            data,
            export_encoder,
        } => {
            let ckpt = RunCheckpoint::load(&checkpoint)?;
            let ds = dataset(&ckpt.config, data.as_deref())?;
            for protocol in [Protocol::TaskAgnostic, Protocol::TaskAware] {
                let r = evaluate_protocol(&ckpt.state.encoder, &ds, &ckpt.config, protocol)?;
                println!("{}", serde_json::to_string(&r)?);
            }
            if let Some(path) = export_encoder {
                EncoderCheckpoint {
                    version: CHECKPOINT_VERSION,
                    config: ckpt.config.encoder.clone(),
                    params: ckpt.state.encoder.clone(),
                }
                .save(&path)?;
            }
        }
        Command::Gradcheck { seeds, tolerance } => {
            let reports = gradcheck_suite(seeds, tolerance)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:<15} rel {:.2e}  abs {:.2e}  {}",
                    r.op_name,
                    r.max_rel_err,
                    r.max_abs_err,
                    if r.passed { "ok" } else { "FAILED" }
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Ablate { common, out, seeds } => {
            let cfg = common.load()?;
            let first = common.seed.unwrap_or(cfg.train.seed);
            let seeds: Vec<u64> = (first..first + seeds).collect();
            let results = run_ablation(&cfg, &seeds, Some(&out))?;
            for (variant, acc) in mean_by_variant(&results) {
                println!("{variant:<8} mean acc_all {acc:.4}");
            }
        }
        Command::Run {
            common,
            out,
            stop_after,
            resume,
        } => {
            let (cfg, resume) = match resume {
                Some(p) => {
                    let ckpt = RunCheckpoint::load(&p)?;
                    (ckpt.config.clone(), Some(ckpt))
                }
                None => (common.load()?, None),
            };
            let outcome = run_to_dir(
                &cfg,
                &out,
                RunOptions {
                    stop: stop_after,
                    resume,
                    ..Default::default()
                },
            )?;
            print_final(&outcome);
            if !outcome.completed {
                println!("stopped at {} epoch {}", outcome.state.phase, outcome.state.epoch);
            }
        }
    }
    Ok(())
}

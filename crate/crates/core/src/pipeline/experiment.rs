use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cluster::{evaluate, EvalOptions, KMeansOptions, MetricsReport, Protocol};
use crate::cra::{region_saliency, write_saliency_dump};
use crate::encoder::{encode, pooled, project, EncoderParams};
use crate::error::{RaplError, Result};
use crate::pipeline::config::{ContrastiveMode, EvalFeatures, ExperimentConfig};
use crate::pipeline::train::{LossComponents, Phase, PhaseState, Trainer};
use crate::seeding::{derive_seed, Purpose};
use crate::synth::{generate, Dataset, SplitTag};

pub const RUN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: Phase,
    pub protocol: Protocol,
    pub acc_all: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    pub seed: u64,
    /// Completed epochs of `phase` when measured.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossComponents,
}

/// Training state plus the logs produced so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub state: PhaseState,
    pub losses: Vec<EpochRecord>,
    pub metrics: Vec<MetricsRow>,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| RaplError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RaplError::io(path, e))?;
        let ckpt: RunCheckpoint = serde_json::from_str(&text)?;
        if ckpt.version != RUN_CHECKPOINT_VERSION {
            return Err(RaplError::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported checkpoint version {}", ckpt.version),
            });
        }
        Ok(ckpt)
    }
}

/// Where a run should halt early; the state is checkpointed there.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopPoint {
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for checkpoints and logs; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub stop: Option<StopPoint>,
    pub resume: Option<RunCheckpoint>,
    /// Stop after pre-training (and its evaluation).
    pub pretrain_only: bool,
    /// Called with the state after every optimizer step.
    pub on_step: Option<&'a mut dyn FnMut(&PhaseState)>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: PhaseState,
    pub losses: Vec<EpochRecord>,
    pub metrics: Vec<MetricsRow>,
    /// Reports of the last evaluation of each protocol.
    pub final_reports: Vec<MetricsReport>,
    /// False when the run halted at a stop point.
    pub completed: bool,
}

impl RunOutcome {
    pub fn final_report(&self, protocol: Protocol) -> Option<&MetricsReport> {
        self.final_reports.iter().find(|r| r.protocol == protocol)
    }
}

/// Vectors that get clustered for evaluation.
pub fn eval_features(
    encoder: &EncoderParams,
    ds: &Dataset,
    indices: &[usize],
    features: EvalFeatures,
) -> Result<crate::numerics::Tensor> {
    let fm = encode(encoder, &ds.inputs(indices)?)?;
    match features {
        EvalFeatures::Embedding => Ok(project(encoder, &fm)?.vectors),
        EvalFeatures::Pooled => pooled(&fm),
    }
}

/// Clusters the protocol's target split: the test set for task-agnostic, the
/// unlabeled training split for task-aware.
pub fn evaluate_protocol(
    encoder: &EncoderParams,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    protocol: Protocol,
) -> Result<MetricsReport> {
    let tag = match protocol {
        Protocol::TaskAgnostic => SplitTag::Test,
        Protocol::TaskAware => SplitTag::UnlabeledTrain,
    };
    let idx = ds.indices(tag);
    let x = eval_features(encoder, ds, &idx, cfg.eval.features)?;
    let opts = EvalOptions {
        kmeans: KMeansOptions {
            seed: derive_seed(cfg.train.seed, Purpose::Cluster, 1, 0),
            ..Default::default()
        },
        scope: cfg.eval.scope,
        normalize: cfg.eval.normalize,
    };
    evaluate(&x, &ds.labels(&idx), &ds.split, protocol, &opts)
}

fn evaluate_both(
    state: &PhaseState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(Vec<MetricsRow>, Vec<MetricsReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for protocol in [Protocol::TaskAgnostic, Protocol::TaskAware] {
        let r = evaluate_protocol(&state.encoder, ds, cfg, protocol)?;
        rows.push(MetricsRow {
            phase: state.phase,
            protocol,
            acc_all: r.acc_all,
            acc_old: r.acc_old,
            acc_new: r.acc_new,
            seed: cfg.train.seed,
            epoch: state.epoch,
        });
        reports.push(r);
    }
    Ok((rows, reports))
}

fn checkpoint_path(dir: &Path, phase: Phase, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("{phase}-epoch{epoch:03}.json"))
}

/// Runs (or resumes) pre-training followed by discovery on `ds`.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset, mut opts: RunOptions) -> Result<RunOutcome> {
    let trainer = Trainer::new(cfg)?;
    if ds.config != cfg.data {
        return Err(RaplError::Config("dataset was generated with a different data config".into()));
    }
    let (mut state, mut losses, mut metrics) = match opts.resume.take() {
        Some(ckpt) => {
            if ckpt.config != *cfg {
                return Err(RaplError::Config("checkpoint was written with a different config".into()));
            }
            (ckpt.state, ckpt.losses, ckpt.metrics)
        }
        None => (PhaseState::init(cfg)?, Vec::new(), Vec::new()),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| RaplError::io(dir, e))?;
    }
    let save = |state: &PhaseState, losses: &[EpochRecord], metrics: &[MetricsRow]| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            RunCheckpoint {
                version: RUN_CHECKPOINT_VERSION,
                config: cfg.clone(),
                state: state.clone(),
                losses: losses.to_vec(),
                metrics: metrics.to_vec(),
            }
            .save(&checkpoint_path(dir, state.phase, state.epoch))?;
        }
        Ok(())
    };

    let mut noop = |_: &PhaseState| {};
    let mut final_reports = Vec::new();
    loop {
        if trainer.phase_done(&state) {
            let evaluated = metrics
                .iter()
                .any(|m| m.phase == state.phase && m.epoch == state.epoch);
            if !evaluated {
                let (rows, reports) = evaluate_both(&state, ds, cfg)?;
                metrics.extend(rows);
                final_reports = reports;
                save(&state, &losses, &metrics)?;
            }
            if state.phase == Phase::Discover || opts.pretrain_only {
                break;
            }
            trainer.start_discover(&mut state, ds)?;
            continue;
        }
        if opts.stop == Some(StopPoint { phase: state.phase, epoch: state.epoch }) {
            save(&state, &losses, &metrics)?;
            return Ok(RunOutcome {
                state,
                losses,
                metrics,
                final_reports,
                completed: false,
            });
        }
        let lr = trainer.lr(state.phase, state.epoch);
        let on_step: &mut dyn FnMut(&PhaseState) = match opts.on_step.as_deref_mut() {
            Some(f) => f,
            None => &mut noop,
        };
        let l = trainer.run_epoch(&mut state, ds, on_step)?;
        losses.push(EpochRecord {
            phase: state.phase,
            epoch: state.epoch - 1,
            lr,
            losses: l,
        });
        let every = cfg.eval.every;
        if every > 0 && state.epoch % every == 0 && !trainer.phase_done(&state) {
            let (rows, reports) = evaluate_both(&state, ds, cfg)?;
            metrics.extend(rows);
            final_reports = reports;
        }
    }
    if final_reports.is_empty() {
        final_reports = evaluate_both(&state, ds, cfg)?.1;
    }
    Ok(RunOutcome {
        state,
        losses,
        metrics,
        final_reports,
        completed: true,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["phase", "protocol", "acc_all", "acc_old", "acc_new", "seed", "epoch"])?;
    for r in rows {
        w.write_record([
            r.phase.to_string(),
            r.protocol.to_string(),
            r.acc_all.to_string(),
            opt(r.acc_old),
            opt(r.acc_new),
            r.seed.to_string(),
            r.epoch.to_string(),
        ])?;
    }
    w.flush().map_err(|e| RaplError::io(&csv_path, e))?;
    let json_path = dir.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(rows)?).map_err(|e| RaplError::io(&json_path, e))
}

pub fn write_losses(dir: &Path, rows: &[EpochRecord]) -> Result<()> {
    let path = dir.join("losses.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["phase", "epoch", "lr", "total", "cra", "pc", "reg", "pcl"])?;
    for r in rows {
        let l = &r.losses;
        w.write_record([
            r.phase.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            l.total.to_string(),
            l.cra.to_string(),
            l.pc.to_string(),
            l.reg.to_string(),
            l.pcl.to_string(),
        ])?;
    }
    w.flush().map_err(|e| RaplError::io(&path, e))
}

/// Region saliency of the first few test samples.
pub fn write_saliency(dir: &Path, encoder: &EncoderParams, ds: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    let trainer = Trainer::new(cfg)?;
    let idx: Vec<usize> = ds
        .indices(SplitTag::Test)
        .into_iter()
        .take(cfg.eval.saliency_samples)
        .collect();
    let [_, h, w] = cfg.encoder.feature_dims;
    // the generator's blank cells only line up when its grid is the feature grid
    let blank = if cfg.data.grid == [h, w] {
        cfg.data.blank_regions()
    } else {
        vec![false; h * w]
    };
    let k = cfg.eval.saliency_top_k.min(blank.iter().filter(|b| !**b).count());
    let fm = encode(encoder, &ds.inputs(&idx)?)?;
    let maps = idx
        .iter()
        .enumerate()
        .map(|(row, &i)| Ok((i, region_saliency(&fm.sample(row), &trainer.grouping, &blank, k)?)))
        .collect::<Result<Vec<_>>>()?;
    write_saliency_dump(&dir.join("saliency.json"), &maps)
}

/// Full run with every artifact written to `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, mut opts: RunOptions) -> Result<RunOutcome> {
    fs::create_dir_all(dir).map_err(|e| RaplError::io(dir, e))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| RaplError::io(&config_path, e))?;
    let ds = generate(&cfg.data)?;
    opts.out_dir = Some(dir.to_path_buf());
    let outcome = run_experiment(cfg, &ds, opts)?;
    write_metrics(dir, &outcome.metrics)?;
    write_losses(dir, &outcome.losses)?;
    if outcome.completed {
        write_saliency(dir, &outcome.state.encoder, &ds, cfg)?;
    }
    Ok(outcome)
}

/// The component-removal rows: full method, no region alignment, no proxy
/// regularization, and view-only contrastive learning.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut no_cra = base.clone();
    no_cra.train.alpha = 0.0;
    let mut no_reg = base.clone();
    no_reg.train.gamma = 0.0;
    let mut vcl = base.clone();
    vcl.train.contrastive = ContrastiveMode::Vanilla;
    vec![
        ("full".to_string(), base.clone()),
        ("no-cra".to_string(), no_cra),
        ("no-reg".to_string(), no_reg),
        ("vcl".to_string(), vcl),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub seed: u64,
    pub acc_all: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
}

/// Runs every `(config, seed)` job, spread over the available cores.
pub fn run_many(jobs: &[(String, ExperimentConfig)], seeds: &[u64]) -> Result<Vec<AblationResult>> {
    let work: Vec<(usize, u64)> = (0..jobs.len())
        .flat_map(|j| seeds.iter().map(move |&s| (j, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationResult>>>> =
        Mutex::new((0..work.len()).map(|_| None).collect());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(work.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(j, seed)) = work.get(i) else { break };
                let (name, cfg) = &jobs[j];
                let cfg = cfg.clone().with_seed(seed);
                let out = generate(&cfg.data).and_then(|ds| {
                    let run = run_experiment(&cfg, &ds, RunOptions::default())?;
                    let r = run
                        .final_report(Protocol::TaskAgnostic)
                        .cloned()
                        .ok_or_else(|| RaplError::State("no task-agnostic report".into()))?;
                    Ok(AblationResult {
                        variant: name.clone(),
                        seed,
                        acc_all: r.acc_all,
                        acc_old: r.acc_old,
                        acc_new: r.acc_new,
                    })
                });
                results.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], dir: Option<&Path>) -> Result<Vec<AblationResult>> {
    let results = run_many(&ablation_variants(base), seeds)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| RaplError::io(dir, e))?;
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["variant", "seed", "acc_all", "acc_old", "acc_new"])?;
        for r in &results {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.acc_all.to_string(),
                opt(r.acc_old),
                opt(r.acc_new),
            ])?;
        }
        w.flush().map_err(|e| RaplError::io(&path, e))?;
    }
    Ok(results)
}

/// Mean `acc_all` per variant, in first-seen order.
pub fn mean_by_variant(results: &[AblationResult]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(v, _, _)| *v == r.variant) {
            Some(e) => {
                e.1 += r.acc_all;
                e.2 += 1;
            }
            None => out.push((r.variant.clone(), r.acc_all, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

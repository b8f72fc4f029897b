use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cra::{build_grouping, cra_loss_on, ChannelGrouping};
use crate::encoder::{encode_on, project_traced, two_view_pairing, EmbeddingBatch, EncoderParams, NormMode};
use crate::error::{RaplError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::pipeline::config::{ContrastiveMode, ExperimentConfig};
use crate::pipeline::schedule::lr_at;
use crate::proxy::{init_new_proxies, negatives_k, pc_loss_on, pcl_loss_on, proxy_reg_loss_on, ProxyBank};
use crate::seeding::{derive_seed, stream, Purpose};
use crate::synth::{Dataset, SplitTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Discover,
}

impl Phase {
    fn index(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Discover => 1,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Discover => "discover",
        })
    }
}

/// Loss terms of one step (or their epoch means). Terms that a phase does not
/// use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub cra: f64,
    pub pc: f64,
    pub reg: f64,
    pub pcl: f64,
}

/// Momentum buffers, one per trainable tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub encoder: Vec<Tensor>,
    pub old_proxies: Tensor,
    pub new_proxies: Option<Tensor>,
}

impl Momentum {
    fn zeros(encoder: &EncoderParams, bank: &ProxyBank) -> Self {
        Momentum {
            encoder: encoder.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            old_proxies: Tensor::zeros(bank.old_proxies.shape()),
            new_proxies: bank.new_proxies.as_ref().map(|p| Tensor::zeros(p.shape())),
        }
    }
}

/// Everything that evolves during training. Randomness is re-derived from
/// `(seed, phase, epoch)`, so this is all a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    pub encoder: EncoderParams,
    pub bank: ProxyBank,
    pub momentum: Momentum,
    pub seed: u64,
}

impl PhaseState {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderParams::init(&cfg.encoder)?;
        let bank = ProxyBank::random(
            cfg.data.num_old,
            cfg.encoder.embed_dim,
            derive_seed(cfg.train.seed, Purpose::Init, 0, 0),
        )?;
        let momentum = Momentum::zeros(&encoder, &bank);
        Ok(PhaseState {
            phase: Phase::Pretrain,
            epoch: 0,
            encoder,
            bank,
            momentum,
            seed: cfg.train.seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// `[n, C, h, w]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DiscoverBatch {
    /// Two views of the labeled samples, each `[n_l, C, h, w]`.
    pub labeled: [Tensor; 2],
    pub labels: Vec<usize>,
    /// Two views of the unlabeled samples, each `[n_u, C, h, w]`.
    pub unlabeled: [Tensor; 2],
}

fn stack(views: &[Tensor], dims: [usize; 3]) -> Result<Tensor> {
    let data = views.iter().flat_map(|v| v.data().iter().copied()).collect();
    Tensor::new(vec![views.len(), dims[0], dims[1], dims[2]], data)
}

/// One augmented view of each labeled sample.
pub fn pretrain_batch(ds: &Dataset, indices: &[usize], step_seed: u64) -> Result<PretrainBatch> {
    let mut views = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = ds
            .samples
            .get(i)
            .ok_or_else(|| RaplError::InvalidArgument(format!("sample {i} out of range")))?;
        if s.split_tag != SplitTag::LabeledTrain {
            return Err(RaplError::InvalidArgument(format!(
                "sample {i} is not labeled training data"
            )));
        }
        views.push(ds.augment_views(s, step_seed)?.0);
    }
    Ok(PretrainBatch {
        inputs: stack(&views, ds.config.input_dims)?,
        labels: ds.labels(indices),
    })
}

pub fn discover_batch(
    ds: &Dataset,
    labeled: &[usize],
    unlabeled: &[usize],
    step_seed: u64,
) -> Result<DiscoverBatch> {
    let views = |idx: &[usize], tag: SplitTag| -> Result<[Tensor; 2]> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &i in idx {
            let s = ds
                .samples
                .get(i)
                .ok_or_else(|| RaplError::InvalidArgument(format!("sample {i} out of range")))?;
            if s.split_tag != tag {
                return Err(RaplError::InvalidArgument(format!("sample {i} is not {tag:?}")));
            }
            let (x, y) = ds.augment_views(s, step_seed)?;
            a.push(x);
            b.push(y);
        }
        Ok([stack(&a, ds.config.input_dims)?, stack(&b, ds.config.input_dims)?])
    };
    Ok(DiscoverBatch {
        labeled: views(labeled, SplitTag::LabeledTrain)?,
        labels: ds.labels(labeled),
        unlabeled: views(unlabeled, SplitTag::UnlabeledTrain)?,
    })
}

/// Fixed per-run quantities shared by every step.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub grouping: ChannelGrouping,
    /// Hard negatives per labeled sample.
    pub k: usize,
}

struct Grads {
    encoder: Vec<Option<Vec<f64>>>,
    old: Option<Vec<f64>>,
    new: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let [d, h, w] = cfg.encoder.feature_dims;
        Ok(Trainer {
            cfg: cfg.clone(),
            grouping: build_grouping(d, h, w)?,
            k: negatives_k(cfg.train.xi, cfg.data.num_old),
        })
    }

    fn sgd(&self, state: &mut PhaseState, grads: Grads, lr: f64) -> Result<()> {
        let t = &self.cfg.train;
        let update = |p: &mut Tensor, buf: &mut Tensor, g: &[f64], decay: f64| {
            for ((w, m), gi) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g) {
                let step = gi + decay * *w;
                *m = t.momentum * *m + step;
                *w -= lr * *m;
            }
        };
        let params = state.encoder.tensors_mut();
        for ((p, buf), g) in params
            .into_iter()
            .zip(state.momentum.encoder.iter_mut())
            .zip(&grads.encoder)
        {
            let zero;
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            update(p, buf, g, t.weight_decay);
        }
        if let Some(g) = &grads.old {
            if state.bank.old_frozen {
                return Err(RaplError::State("gradient reached frozen old proxies".into()));
            }
            update(&mut state.bank.old_proxies, &mut state.momentum.old_proxies, g, 0.0);
        }
        if let (Some(g), Some(p), Some(buf)) = (
            &grads.new,
            state.bank.new_proxies.as_mut(),
            state.momentum.new_proxies.as_mut(),
        ) {
            update(p, buf, g, 0.0);
        }
        for p in state.encoder.tensors() {
            if !p.is_finite() {
                return Err(RaplError::NonFinite("parameters after update".into()));
            }
        }
        Ok(())
    }

    fn collect(tape: &Tape, loss: Var, enc: &[Var], old: Var, new: Option<Var>) -> Result<Grads> {
        let g = tape.backward(loss)?;
        Ok(Grads {
            encoder: enc.iter().map(|v| g.get(*v).map(|s| s.to_vec())).collect(),
            old: g.get(old).map(|s| s.to_vec()),
            new: new.and_then(|v| g.get(v).map(|s| s.to_vec())),
        })
    }

    /// `α·CRA + β·PC + γ·REG` on a labeled batch, then one SGD step on the
    /// encoder, head and old proxies.
    pub fn pretrain_step(&self, state: &mut PhaseState, batch: &PretrainBatch, lr: f64) -> Result<LossComponents> {
        if state.phase != Phase::Pretrain {
            return Err(RaplError::State(format!("pretrain step during {}", state.phase)));
        }
        let t = &self.cfg.train;
        let mut tape = Tape::new();
        let enc = state.encoder.register(&mut tape, true)?;
        let proxies = state.bank.register(&mut tape)?;
        let x = tape.constant(&batch.inputs)?;
        let fm = encode_on(&mut tape, &enc, x)?;
        let cra = cra_loss_on(&mut tape, fm, &self.grouping)?;
        let proj = project_traced(&mut tape, &enc, fm, NormMode::Batch)?;
        let emb = proj.embedding;
        let pc = pc_loss_on(&mut tape, emb, proxies.old, &batch.labels, self.k)?;
        let reg = proxy_reg_loss_on(&mut tape, proxies.old)?;
        let total = tape.weighted_sum(&[(cra, t.alpha), (pc, t.beta_pretrain), (reg, t.gamma)])?;
        let losses = LossComponents {
            total: tape.value(total).item(),
            cra: tape.value(cra).item(),
            pc: tape.value(pc).item(),
            reg: tape.value(reg).item(),
            pcl: 0.0,
        };
        let grads = Self::collect(&tape, total, &enc.vars, proxies.old, None)?;
        self.sgd(state, grads, lr)?;
        update_norm_stats(state, &tape, &proj.pre_norm);
        Ok(losses)
    }

    /// `α·CRA + β·PC + δ·PCL` on two views of a mixed batch, then one SGD step
    /// on the encoder, head and new proxies. Old proxies stay fixed.
    pub fn discover_step(&self, state: &mut PhaseState, batch: &DiscoverBatch, lr: f64) -> Result<LossComponents> {
        if state.phase != Phase::Discover {
            return Err(RaplError::State(format!("discover step during {}", state.phase)));
        }
        if state.bank.new_proxies.is_none() {
            return Err(RaplError::State("new proxies are not initialized".into()));
        }
        let t = &self.cfg.train;
        let nl = batch.labels.len();
        let n = nl + batch.unlabeled[0].shape()[0];
        // rows: [labeled v1, unlabeled v1, labeled v2, unlabeled v2]
        let inputs = Tensor::concat_rows(&[
            &batch.labeled[0],
            &batch.unlabeled[0],
            &batch.labeled[1],
            &batch.unlabeled[1],
        ])?;
        let mut tape = Tape::new();
        let enc = state.encoder.register(&mut tape, true)?;
        let proxies = state.bank.register(&mut tape)?;
        let x = tape.constant(&inputs)?;
        let fm = encode_on(&mut tape, &enc, x)?;
        let cra = cra_loss_on(&mut tape, fm, &self.grouping)?;
        let proj = project_traced(&mut tape, &enc, fm, NormMode::Batch)?;
        let emb = proj.embedding;

        let mut terms = vec![(cra, t.alpha)];
        let mut pc_value = 0.0;
        if nl > 0 {
            let rows: Vec<usize> = (0..nl).chain(n..n + nl).collect();
            let labels: Vec<usize> = batch.labels.iter().chain(&batch.labels).copied().collect();
            let lab = tape.select_rows(emb, &rows)?;
            let pc = pc_loss_on(&mut tape, lab, proxies.old, &labels, self.k)?;
            pc_value = tape.value(pc).item();
            terms.push((pc, t.beta_discover));
        }
        let bank_rows: Vec<Var> = match t.contrastive {
            ContrastiveMode::Proxy => [Some(proxies.old), proxies.new].into_iter().flatten().collect(),
            ContrastiveMode::Vanilla => Vec::new(),
        };
        let pcl = pcl_loss_on(&mut tape, emb, &two_view_pairing(n), &bank_rows, t.tau)?;
        terms.push((pcl, t.delta));
        let total = tape.weighted_sum(&terms)?;
        let losses = LossComponents {
            total: tape.value(total).item(),
            cra: tape.value(cra).item(),
            pc: pc_value,
            reg: 0.0,
            pcl: tape.value(pcl).item(),
        };
        let grads = Self::collect(&tape, total, &enc.vars, proxies.old, proxies.new)?;
        self.sgd(state, grads, lr)?;
        update_norm_stats(state, &tape, &proj.pre_norm);
        if t.renormalize_new_proxies {
            state.bank.renormalize_new()?;
        }
        Ok(losses)
    }

    fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.cfg.train.pretrain_epochs,
            Phase::Discover => self.cfg.train.discover_epochs,
        }
    }

    pub fn lr(&self, phase: Phase, epoch: usize) -> f64 {
        let t = &self.cfg.train;
        lr_at(epoch, t.lr, t.warmup_epochs, self.epochs(phase))
    }

    pub fn phase_done(&self, state: &PhaseState) -> bool {
        state.epoch >= self.epochs(state.phase)
    }

    /// Runs one epoch of the current phase and returns the mean of each loss
    /// term over its steps. `on_step` sees the state after every step.
    pub fn run_epoch(
        &self,
        state: &mut PhaseState,
        ds: &Dataset,
        on_step: &mut dyn FnMut(&PhaseState),
    ) -> Result<LossComponents> {
        let phase = state.phase;
        let epoch = state.epoch;
        let lr = self.lr(phase, epoch);
        let mut order_rng = stream(state.seed, Purpose::Order, phase.index(), epoch as u64);
        let seed = state.seed;
        let step_seed =
            |step: usize| derive_seed(seed, Purpose::Augment, phase.index() << 32 | epoch as u64, step as u64);
        let b = self.cfg.train.batch_size;

        let mut labeled = ds.indices(SplitTag::LabeledTrain);
        labeled.shuffle(&mut order_rng);
        let mut sums = LossComponents::default();
        let mut steps = 0usize;
        match phase {
            Phase::Pretrain => {
                if labeled.len() < 2 {
                    return Err(RaplError::Config("pre-training needs at least two labeled samples".into()));
                }
                for (step, chunk) in labeled.chunks(b).enumerate() {
                    let batch = pretrain_batch(ds, chunk, step_seed(step))?;
                    add(&mut sums, &self.pretrain_step(state, &batch, lr)?);
                    steps += 1;
                    on_step(state);
                }
            }
            Phase::Discover => {
                let mut unlabeled = ds.indices(SplitTag::UnlabeledTrain);
                unlabeled.shuffle(&mut order_rng);
                if unlabeled.is_empty() || labeled.is_empty() {
                    return Err(RaplError::Config("discovery needs labeled and unlabeled samples".into()));
                }
                let half = (b / 2).max(1);
                let n_steps = labeled.len().max(unlabeled.len()).div_ceil(half);
                // the shorter split is cycled through fresh permutations
                let lab = cycle(&labeled, n_steps * half, &mut order_rng);
                let unl = cycle(&unlabeled, n_steps * half, &mut order_rng);
                for step in 0..n_steps {
                    let l = &lab[step * half..(step + 1) * half];
                    let u = &unl[step * half..(step + 1) * half];
                    let batch = discover_batch(ds, l, u, step_seed(step))?;
                    add(&mut sums, &self.discover_step(state, &batch, lr)?);
                    steps += 1;
                    on_step(state);
                }
            }
        }
        state.epoch += 1;
        let n = steps.max(1) as f64;
        Ok(LossComponents {
            total: sums.total / n,
            cra: sums.cra / n,
            pc: sums.pc / n,
            reg: sums.reg / n,
            pcl: sums.pcl / n,
        })
    }

    /// Switches a finished pre-training state to discovery: new proxies from
    /// k-means on the unlabeled embeddings, old proxies frozen, fresh
    /// momentum.
    pub fn start_discover(&self, state: &mut PhaseState, ds: &Dataset) -> Result<()> {
        if state.phase != Phase::Pretrain {
            return Err(RaplError::State("discovery already started".into()));
        }
        let idx = ds.indices(SplitTag::UnlabeledTrain);
        let fm = crate::encoder::encode(&state.encoder, &ds.inputs(&idx)?)?;
        let emb = crate::encoder::project(&state.encoder, &fm)?;
        let seed = derive_seed(state.seed, Purpose::Cluster, 0, 0);
        let new = init_new_proxies(&emb, ds.config.num_new, seed)?;
        state.bank.set_new_proxies(new)?;
        state.bank.old_frozen = true;
        state.phase = Phase::Discover;
        state.epoch = 0;
        state.momentum = Momentum::zeros(&state.encoder, &state.bank);
        Ok(())
    }
}

fn add(acc: &mut LossComponents, x: &LossComponents) {
    acc.total += x.total;
    acc.cra += x.cra;
    acc.pc += x.pc;
    acc.reg += x.reg;
    acc.pcl += x.pcl;
}

fn cycle(items: &[usize], len: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut out = items.to_vec();
    while out.len() < len {
        let mut more = items.to_vec();
        more.shuffle(rng);
        out.extend(more);
    }
    out.truncate(len);
    out
}

fn update_norm_stats(state: &mut PhaseState, tape: &Tape, pre_norm: &[Var]) {
    for (norm, v) in state.encoder.head_norm.iter_mut().zip(pre_norm) {
        norm.update_running(tape.value(*v));
    }
}

/// Embeddings of `indices` under the current encoder.
pub fn embed(encoder: &EncoderParams, ds: &Dataset, indices: &[usize]) -> Result<EmbeddingBatch> {
    let fm = crate::encoder::encode(encoder, &ds.inputs(indices)?)?;
    crate::encoder::project(encoder, &fm)?.with_labels(ds.labels(indices))
}

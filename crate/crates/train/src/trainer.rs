//! Stage-wise optimisation with validation, best-checkpoint retention and
//! bit-exact resumption.

use std::collections::BTreeMap;

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use finenet_core::error::{Error, Result};
use finenet_core::losses::{branch_loss_var, combine_loss_var, LossValue};
use finenet_core::metrics::psnr;
use finenet_core::model::ModelConfig;
use finenet_core::nn::ParamStore;
use finenet_core::{Frame, FrameWindow, Graph, Tensor, Var};
use finenet_data::dataset::derive_seed;
use finenet_data::sample::{samples, Batch, Sample};
use finenet_data::VideoData;

use crate::checkpoint::Checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::infer::{prefilter, Loaded};
use crate::optim::{clip_global_norm, Adam};
use crate::stage::{StageArch, StageModel};

/// Videos a stage trains and validates on.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [VideoData],
    pub val: &'a [VideoData],
    pub heatmap_sigma: f64,
}

/// Checkpoints of earlier stages.
#[derive(Clone, Debug, Default)]
pub struct Dependencies {
    pub stage1: Option<Checkpoint>,
    pub enhance: Option<Checkpoint>,
    pub interp: Option<Checkpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: LossValue,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    pub stopped_early: bool,
}

/// Branch outputs cached for the combination stage.
#[derive(Clone, Debug)]
struct PairSample {
    enhanced: Tensor,
    interpolated: Tensor,
    gt: Tensor,
}

/// Branch features cached for the early-fusion head.
#[derive(Clone, Debug)]
struct FeatureSample {
    enh: [Tensor; 5],
    interp: [Tensor; 2],
    target: Tensor,
    gt: Tensor,
}

#[derive(Clone, Debug)]
enum Prepared {
    Windows(Vec<Sample>),
    Pairs(Vec<PairSample>),
    Features(Vec<FeatureSample>),
}

impl Prepared {
    fn len(&self) -> usize {
        match self {
            Prepared::Windows(v) => v.len(),
            Prepared::Pairs(v) => v.len(),
            Prepared::Features(v) => v.len(),
        }
    }

    fn truncated(mut self, n: usize) -> Self {
        match &mut self {
            Prepared::Windows(v) => v.truncate(n),
            Prepared::Pairs(v) => v.truncate(n),
            Prepared::Features(v) => v.truncate(n),
        }
        self
    }
}

fn stack(parts: Vec<&Tensor>) -> Result<Tensor> {
    Tensor::stack(&parts)
}

/// Indices of the batch used at 0-based `step`, a pure function of
/// `(seed, step)` so a resumed run sees the same batches.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch", step as u64));
    sample(&mut rng, n, batch).into_vec()
}

fn ground_truth(s: &Sample) -> Result<&Frame> {
    s.window.ground_truth.as_ref().ok_or_else(|| Error::Data(format!("window {} of {} has no ground truth", s.window.center, s.video)))
}

pub struct Trainer {
    stage: Stage,
    arch: StageArch,
    config: TrainConfig,
    model: StageModel,
    store: ParamStore,
    adam: Adam,
    step: usize,
    train: Prepared,
    val: Prepared,
    best: Option<(f64, usize, BTreeMap<String, Tensor>)>,
    stale: usize,
}

impl Trainer {
    /// Fresh parameters for `stage`. The combination stage needs both branch
    /// checkpoints, and two-stage training needs the stage-1 checkpoint.
    pub fn new(stage: Stage, model: &ModelConfig, config: &TrainConfig, data: TrainData<'_>, deps: &Dependencies) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let arch = StageArch::of(stage, model);
        let (net, mut store) = StageModel::build(stage, &arch, config.seed)?;

        let (train_videos, val_videos) = if config.two_stage && stage != Stage::Stage1 {
            let ckpt = deps.stage1.as_ref().ok_or_else(|| Error::Dependency("two-stage training needs a stage1 checkpoint".into()))?;
            let s1 = Loaded::restore(ckpt, Stage::Stage1, model)?;
            let filter = |v: &[VideoData]| v.iter().map(|v| prefilter(&s1, v)).collect::<Result<Vec<_>>>();
            (filter(data.train)?, filter(data.val)?)
        } else {
            (data.train.to_vec(), data.val.to_vec())
        };

        let (train, val) = match &net {
            StageModel::Enhance(_) | StageModel::Interp(_) => {
                let hm = net.uses_heatmaps();
                (
                    Prepared::Windows(samples(&train_videos, hm, data.heatmap_sigma)?),
                    Prepared::Windows(samples(&val_videos, hm, data.heatmap_sigma)?),
                )
            }
            StageModel::Combine(_) | StageModel::Early(_) => {
                let (Some(en), Some(ip)) = (&deps.enhance, &deps.interp) else {
                    return Err(Error::Dependency("the combine stage needs both enhance and interp checkpoints".into()));
                };
                let en = Loaded::restore(en, Stage::Enhance, model)?;
                let ip = Loaded::restore(ip, Stage::Interp, model)?;
                if let StageModel::Early(_) = net {
                    // Early fusion starts from the trained branch features.
                    for src in [&en.store, &ip.store] {
                        for (name, t) in src.iter() {
                            if store.get(name).is_some() {
                                store.set(name, t.clone())?;
                            }
                        }
                    }
                }
                let hm = en.uses_heatmaps() || ip.uses_heatmaps() || net.uses_heatmaps();
                let tr = samples(&train_videos, hm, data.heatmap_sigma)?;
                let va = samples(&val_videos, hm, data.heatmap_sigma)?;
                match &net {
                    StageModel::Combine(_) => (Prepared::Pairs(pairs(&en, &ip, &tr)?), Prepared::Pairs(pairs(&en, &ip, &va)?)),
                    _ => (
                        Prepared::Features(features(&net, &store, &tr)?),
                        Prepared::Features(features(&net, &store, &va)?),
                    ),
                }
            }
        };
        if train.len() == 0 {
            return Err(Error::Data("no training windows".into()));
        }
        let val = val.truncated(config.max_val_windows);
        info!(
            "{stage}: {} parameters, {} training windows, {} validation windows",
            store.num_scalars(),
            train.len(),
            val.len()
        );
        Ok(Trainer {
            stage,
            arch,
            config: config.clone(),
            model: net,
            store,
            adam: Adam::new(config.beta1, config.beta2, config.eps),
            step: 0,
            train,
            val,
            best: None,
            stale: 0,
        })
    }

    /// Continues from `ckpt`, which must hold this stage's architecture and
    /// optimizer state.
    pub fn resume(ckpt: &Checkpoint, model: &ModelConfig, config: &TrainConfig, data: TrainData<'_>, deps: &Dependencies) -> Result<Self> {
        let mut t = Trainer::new(ckpt.stage, model, config, data, deps)?;
        let (_, store) = ckpt.restore(ckpt.stage, model)?;
        let state = ckpt.optimizer.clone().ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
        if ckpt.train.seed != config.seed {
            return Err(Error::config(format!("resuming with seed {} but the checkpoint used {}", config.seed, ckpt.train.seed)));
        }
        t.store = store;
        t.adam.state = state;
        t.step = ckpt.step;
        if let Some(p) = ckpt.best_val_psnr {
            t.best = Some((p, ckpt.step, t.store.iter().map(|(n, v)| (n.clone(), v.clone())).collect()));
        }
        Ok(t)
    }

    /// Takes the best-so-far parameters from a best checkpoint written by
    /// the run being resumed, so early stopping and the best checkpoint
    /// carry on as if training had not been interrupted.
    pub fn restore_best(&mut self, best: &Checkpoint) -> Result<()> {
        if best.stage != self.stage || best.arch_hash != self.arch.hash(self.stage) {
            return Err(Error::Version("best checkpoint belongs to a different architecture".into()));
        }
        let Some(p) = best.best_val_psnr else { return Ok(()) };
        if best.step > self.step {
            return Err(Error::Data(format!("best checkpoint is from step {}, after the resumed step {}", best.step, self.step)));
        }
        self.best = Some((p, best.step, best.params.clone()));
        self.stale = if self.config.val_every > 0 { (self.step - best.step) / self.config.val_every } else { 0 };
        Ok(())
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn model(&self) -> &StageModel {
        &self.model
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    /// Loss and parameter gradients on the given training windows.
    pub fn loss_and_grads(&self, indices: &[usize]) -> Result<(LossValue, BTreeMap<String, Tensor>)> {
        let mut g = Graph::with_params(&self.store);
        let loss = self.loss_graph(&mut g, &self.train, indices)?;
        let value = loss.value(&g);
        let grads = g.backward(loss.total).params(&g);
        Ok((value, grads))
    }

    fn loss_graph(&self, g: &mut Graph<'_>, data: &Prepared, idx: &[usize]) -> Result<finenet_core::losses::LossVars> {
        let (out, gt, branch) = self.forward(g, data, idx)?;
        Ok(if branch { branch_loss_var(g, out, gt) } else { combine_loss_var(g, out, gt) })
    }

    /// Unclamped output and ground truth of a batch; the flag is set for
    /// branch stages.
    fn forward(&self, g: &mut Graph<'_>, data: &Prepared, idx: &[usize]) -> Result<(Var, Var, bool)> {
        match (data, &self.model) {
            (Prepared::Windows(s), m) => {
                let batch = Batch::new(&idx.iter().map(|&i| &s[i]).collect::<Vec<_>>())?;
                let frames: [Var; 5] = batch.frames.map(|t| g.constant(t));
                let hm = batch.heatmaps.map(|h| h.map(|t| g.constant(t)));
                let out = m.branch_forward(g, &frames, hm.as_ref())?;
                Ok((out, g.constant(batch.target), true))
            }
            (Prepared::Pairs(s), StageModel::Combine(c)) => {
                let en = g.constant(stack(idx.iter().map(|&i| &s[i].enhanced).collect())?);
                let ip = g.constant(stack(idx.iter().map(|&i| &s[i].interpolated).collect())?);
                let gt = g.constant(stack(idx.iter().map(|&i| &s[i].gt).collect())?);
                Ok((c.forward(g, en, ip), gt, false))
            }
            (Prepared::Features(s), StageModel::Early(e)) => {
                let mut e5 = Vec::with_capacity(5);
                for k in 0..5 {
                    e5.push(g.constant(stack(idx.iter().map(|&i| &s[i].enh[k]).collect())?));
                }
                let mut d2 = Vec::with_capacity(2);
                for k in 0..2 {
                    d2.push(g.constant(stack(idx.iter().map(|&i| &s[i].interp[k]).collect())?));
                }
                let target = g.constant(stack(idx.iter().map(|&i| &s[i].target).collect())?);
                let gt = g.constant(stack(idx.iter().map(|&i| &s[i].gt).collect())?);
                let e5: [Var; 5] = e5.try_into().expect("five maps");
                let d2: [Var; 2] = d2.try_into().expect("two maps");
                Ok((e.head(g, &e5, &d2, target), gt, false))
            }
            _ => Err(Error::invalid("prepared data does not match the stage network")),
        }
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let idx = batch_indices(self.config.seed, self.step, self.train.len(), self.config.batch_size);
        let (loss, mut grads) = self.loss_and_grads(&idx)?;
        if !loss.total.is_finite() {
            return Err(Error::Data(format!("{} loss became non-finite at step {}", self.stage, self.step + 1)));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.config.lr_at(self.step);
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, loss, grad_norm, lr })
    }

    /// Mean PSNR of the clamped stage output over the validation windows,
    /// or `None` when there are none.
    pub fn validate(&self) -> Result<Option<f64>> {
        let n = self.val.len();
        if n == 0 {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in (0..n).collect::<Vec<_>>().chunks(self.config.batch_size) {
            let mut g = Graph::with_params(&self.store);
            let (out, gt, _) = self.forward(&mut g, &self.val, chunk)?;
            let (out, gt) = (g.value(out), g.value(gt));
            for b in 0..chunk.len() {
                total += psnr(&Frame::from_clamped(&out.select(b))?, &Frame::new(gt.select(b))?)?;
            }
        }
        Ok(Some(total / n as f64))
    }

    /// Current state, including optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.stage, self.arch.clone(), self.config.clone(), &self.store);
        c.step = self.step;
        c.best_val_psnr = self.best.as_ref().map(|b| b.0);
        c.optimizer = Some(self.adam.state.clone());
        c
    }

    /// Parameters with the best validation PSNR so far; the current ones
    /// when validation never ran.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.stage, self.arch.clone(), self.config.clone(), &self.store);
        c.step = self.step;
        if let Some((p, step, params)) = &self.best {
            c.params = params.clone();
            c.step = *step;
            c.best_val_psnr = Some(*p);
        }
        c
    }

    fn record_validation(&mut self) -> Result<Option<ValRecord>> {
        let Some(p) = self.validate()? else { return Ok(None) };
        info!("{} step {}: validation PSNR {p:.3} dB", self.stage, self.step);
        if self.best.as_ref().is_none_or(|b| p > b.0) {
            self.best = Some((p, self.step, self.store.iter().map(|(n, v)| (n.clone(), v.clone())).collect()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(Some(ValRecord { step: self.step, psnr: p }))
    }

    /// Steps until `config.steps` or until validation stops improving.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let mut steps = Vec::new();
        let mut validations = Vec::new();
        let mut stopped_early = false;
        let mut window = 0.0;
        while self.step < self.config.steps {
            let rec = self.step()?;
            window += rec.loss.total;
            if rec.step % self.config.log_every == 0 {
                info!(
                    "{} step {}: loss {:.6} (interval mean {:.6}), grad norm {:.4}, lr {:.2e}",
                    self.stage,
                    rec.step,
                    rec.loss.total,
                    window / self.config.log_every as f64,
                    rec.grad_norm,
                    rec.lr
                );
                window = 0.0;
            }
            steps.push(rec);
            if self.config.val_every > 0 && self.step % self.config.val_every == 0 {
                if let Some(v) = self.record_validation()? {
                    validations.push(v);
                }
                if self.config.patience > 0 && self.stale >= self.config.patience {
                    info!("{}: no validation improvement for {} checks, stopping", self.stage, self.stale);
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(TrainOutcome { last: self.checkpoint(), best: self.best_checkpoint(), steps, validations, stopped_early })
    }
}

fn pairs(en: &Loaded, ip: &Loaded, samples: &[Sample]) -> Result<Vec<PairSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PairSample {
                enhanced: en.branch_output(&s.window, s.heatmaps.as_ref())?.into_tensor(),
                interpolated: ip.branch_output(&s.window, s.heatmaps.as_ref())?.into_tensor(),
                gt: ground_truth(s)?.tensor().clone(),
            })
        })
        .collect()
}

fn features(net: &StageModel, store: &ParamStore, samples: &[Sample]) -> Result<Vec<FeatureSample>> {
    let StageModel::Early(e) = net else {
        return Err(Error::invalid("feature caching needs the early-fusion network"));
    };
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::with_params(store);
            let frames: [Var; 5] = std::array::from_fn(|i| g.constant(s.window.frames[i].tensor().clone()));
            let hm: Option<[Var; 5]> = s.heatmaps.as_ref().map(|h| std::array::from_fn(|i| g.constant(h[i].tensor().clone())));
            let (enh, interp) = e.features(&mut g, &frames, hm.as_ref());
            Ok(FeatureSample {
                enh: enh.map(|v| g.value(v).clone()),
                interp: interp.map(|v| g.value(v).clone()),
                target: s.window.frames[FrameWindow::CENTER].tensor().clone(),
                gt: ground_truth(s)?.tensor().clone(),
            })
        })
        .collect()
}

/// Trains `stage` from scratch to completion.
pub fn train_stage(stage: Stage, model: &ModelConfig, config: &TrainConfig, data: TrainData<'_>, deps: &Dependencies) -> Result<TrainOutcome> {
    Trainer::new(stage, model, config, data, deps)?.run()
}

//! Mini-batch training of a [`Model`] in stages:
//!
//! 1. base: front-end (learned mode) and positioning network on single
//!    measurements;
//! 2. feature fusion: GRU and positioning network on windows of features
//!    from the frozen front-end;
//! 3. map fusion: the map network on maps from the frozen model.
//!
//! Each stage's shuffling and dropout come from a generator seeded by
//! `(seed, stage, epoch)`, so a run resumed from a checkpoint continues the
//! uninterrupted run exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_sim::Dataset;
use crate::error::{Error, Result};
use crate::frontend::LearnedFrontend;
use crate::model::{gather, Model};
use crate::numerics::optim::{Adam, AdamConfig, AdamState};
use crate::numerics::{Graph, Mode, Tensor, Var};
use crate::posnet::{apply_running_stats, PendingStats};
use crate::probmap::reference_map;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    /// Cosine decay from the base rate to `min_factor` times it.
    Cosine { min_factor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { every, factor } => factor.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine { min_factor } => {
                let t = if total <= 1 { 0.0 } else { epoch as f64 / (total - 1) as f64 };
                min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs of each fusion stage.
    pub fusion_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    /// Learning-rate multiplier of the front-end weights.
    pub frontend_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            fusion_epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            frontend_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} must be at least 2", self.batch_size)));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(self.frontend_lr_scale >= 0.0) {
            return Err(Error::Config("front-end learning-rate scale must be non-negative".into()));
        }
        match self.schedule {
            LrSchedule::Step { every, factor } if every == 0 || !(factor > 0.0) => {
                Err(Error::Config("step schedule needs every > 0 and factor > 0".into()))
            }
            LrSchedule::Cosine { min_factor } if !(0.0..=1.0).contains(&min_factor) => {
                Err(Error::Config("cosine min_factor must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    FeatureFusion,
    MapFusion,
}

impl Stage {
    fn salt(self) -> u64 {
        match self {
            Stage::Base => 0x11,
            Stage::FeatureFusion => 0x22,
            Stage::MapFusion => 0x33,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    /// Mean training loss of each completed epoch.
    pub losses: Vec<f64>,
}

/// Where training stands; saved with checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    pub stages: Vec<StageLog>,
    /// Optimizer state of the stage in progress.
    pub adam: AdamState,
}

impl Progress {
    pub fn epochs_done(&self, stage: Stage) -> usize {
        self.stages.iter().find(|s| s.stage == stage).map_or(0, |s| s.losses.len())
    }

    fn log(&mut self, stage: Stage) -> &mut StageLog {
        if let Some(i) = self.stages.iter().position(|s| s.stage == stage) {
            return &mut self.stages[i];
        }
        self.stages.push(StageLog { stage, losses: Vec::new() });
        self.stages.last_mut().unwrap()
    }

    /// All epoch losses in stage order.
    pub fn loss_curve(&self) -> Vec<(Stage, usize, f64)> {
        self.stages
            .iter()
            .flat_map(|s| s.losses.iter().enumerate().map(move |(e, &l)| (s.stage, e, l)))
            .collect()
    }
}

/// Stages a model of this kind goes through, with their epoch budgets.
pub fn plan(model: &Model, cfg: &TrainConfig) -> Vec<(Stage, usize)> {
    let mut out = vec![(Stage::Base, cfg.epochs)];
    if model.feature_fusion.is_some() && model.spec.delta() > 0 {
        out.push((Stage::FeatureFusion, cfg.fusion_epochs));
    }
    if model.map_rnn.is_some() {
        out.push((Stage::MapFusion, cfg.fusion_epochs));
    }
    out
}

/// Optional callback after every epoch: `(stage, epoch, loss)`.
pub type EpochHook<'a> = dyn FnMut(Stage, usize, f64, &Model, &Progress) -> Result<()> + 'a;

/// Runs every unfinished stage to its budget.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig, progress: &mut Progress, hook: Option<&mut EpochHook<'_>>) -> Result<()> {
    cfg.validate()?;
    model.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let mut hook = hook;
    let targets = ds
        .records
        .iter()
        .map(|r| reference_map(r.position_f64(), &model.grid).map(|p| p.into_iter().map(|v| v as f32).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    for (stage, budget) in plan(model, cfg) {
        let done = progress.epochs_done(stage);
        if done >= budget {
            continue;
        }
        if done == 0 {
            progress.adam = AdamState::default();
        }
        let mut runner = StageRunner::new(model, ds, stage, &targets)?;
        for epoch in done..budget {
            let loss = runner.epoch(model, cfg, epoch, budget, &mut progress.adam)?;
            progress.log(stage).losses.push(loss);
            if let Some(h) = hook.as_deref_mut() {
                h(stage, epoch, loss, model, progress)?;
            }
        }
    }
    Ok(())
}

/// Per-stage training data.
struct StageRunner<'d> {
    stage: Stage,
    ds: &'d Dataset,
    /// Sample index -> record indices of its input window(s).
    samples: Vec<Vec<usize>>,
    /// Reference map of each sample's newest record.
    targets: Vec<Vec<f32>>,
    /// Precomputed per-record inputs (features or maps); empty when the
    /// front-end is trained.
    inputs: Option<Tensor<f32>>,
}

impl<'d> StageRunner<'d> {
    fn new(model: &mut Model, ds: &'d Dataset, stage: Stage, targets: &[Vec<f32>]) -> Result<Self> {
        let delta = model.spec.delta();
        let stride = delta + 1;
        let tau = model.spec.tau();
        let hs: Vec<_> = ds.records.iter().map(|r| &r.h).collect();
        let mut samples = Vec::new();
        let inputs;
        match stage {
            Stage::Base => {
                samples.extend((0..ds.len()).map(|i| vec![i]));
                inputs = match model.frontend {
                    Some(_) => None,
                    None => Some(model.measurement_features(&hs)?),
                };
            }
            Stage::FeatureFusion => {
                for traj in ds.trajectories() {
                    samples.extend(traj.clone().filter(|t| t - traj.start >= delta).map(|t| (t - delta..=t).collect()));
                }
                inputs = Some(model.measurement_features(&hs)?);
            }
            Stage::MapFusion => {
                // Maps of every record with a full feature window, indexed by
                // record; records without one keep a zero row that is never
                // selected.
                let features = model.measurement_features(&hs)?;
                let mut windows = Vec::new();
                let mut rows = Vec::new();
                for traj in ds.trajectories() {
                    for t in traj.clone().filter(|t| t - traj.start >= delta) {
                        windows.push((t - delta..=t).collect::<Vec<_>>());
                        rows.push(t);
                    }
                    samples.extend(
                        traj.clone()
                            .filter(|t| t - traj.start >= model.spec.history())
                            .map(|t| (0..=tau).map(|j| t - (tau - j) * stride).collect()),
                    );
                }
                let maps = model.window_maps(&features, &windows)?;
                let k = model.grid.len();
                let mut all = Tensor::zeros(&[ds.len(), k]);
                for (i, &r) in rows.iter().enumerate() {
                    all.data_mut()[r * k..(r + 1) * k].copy_from_slice(&maps.data()[i * k..(i + 1) * k]);
                }
                inputs = Some(all);
            }
        }
        if samples.len() < 2 {
            return Err(Error::Contract(format!("{stage:?} stage has {} training samples", samples.len())));
        }
        let targets = samples.iter().map(|w| targets[*w.last().unwrap()].clone()).collect();
        Ok(StageRunner {
            stage,
            ds,
            samples,
            targets,
            inputs,
        })
    }

    fn freeze(&self, model: &mut Model) {
        let store = &mut model.store;
        for e in store.entries_mut() {
            e.frozen = false;
        }
        match self.stage {
            Stage::Base => {
                store.set_frozen(crate::fusion::FeatureFusion::PREFIX, true);
                store.set_frozen(crate::fusion::MapRnn::PREFIX, true);
            }
            Stage::FeatureFusion => {
                store.set_frozen(LearnedFrontend::PREFIX, true);
                store.set_frozen(crate::fusion::MapRnn::PREFIX, true);
            }
            Stage::MapFusion => {
                for e in store.entries_mut() {
                    e.frozen = !e.name.starts_with(crate::fusion::MapRnn::PREFIX);
                }
            }
        }
    }

    fn batch_loss(&self, model: &Model, g: &mut Graph<f32>, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Var, Vec<PendingStats<f32>>)> {
        let steps = self.samples[batch[0]].len();
        let seq = match (&self.inputs, self.stage) {
            (None, _) => {
                let hs: Vec<_> = batch.iter().map(|&s| &self.ds.records[self.samples[s][0]].h).collect();
                vec![model.input_var(g, &hs)?]
            }
            (Some(inputs), _) => (0..steps)
                .map(|t| Ok(g.constant(gather(inputs, batch.iter().map(|&s| self.samples[s][t]))?)))
                .collect::<Result<Vec<_>>>()?,
        };
        let target: Vec<f32> = batch.iter().flat_map(|&s| self.targets[s].iter().copied()).collect();
        let (p, pending) = match self.stage {
            Stage::Base => model.posnet.forward(g, &model.store, seq[0], Mode::Train, rng)?,
            Stage::FeatureFusion => model.maps_from_windows(g, &seq, Mode::Train, rng)?,
            Stage::MapFusion => {
                let rnn = model.map_rnn.as_ref().ok_or_else(|| Error::Contract("model has no map network".into()))?;
                (rnn.fuse(g, &model.store, &seq)?, Vec::new())
            }
        };
        Ok((g.bce(p, &target)?, pending))
    }

    fn epoch(&mut self, model: &mut Model, cfg: &TrainConfig, epoch: usize, total: usize, adam_state: &mut AdamState) -> Result<f64> {
        self.freeze(model);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (self.stage.salt() << 56));
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);

        let mut adam = Adam::new(AdamConfig {
            lr: cfg.adam.lr * cfg.schedule.factor(epoch, total),
            ..cfg.adam
        });
        adam.state = std::mem::take(adam_state);
        let scales = [(LearnedFrontend::PREFIX, cfg.frontend_lr_scale)];
        let momentum = model.posnet.cfg.bn_momentum;

        let mut total_loss = 0.0;
        let mut count = 0;
        let result = (|| -> Result<()> {
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                // Batch statistics need two samples.
                if batch.len() < 2 {
                    continue;
                }
                let mut g = Graph::new();
                let (loss, pending) = self.batch_loss(model, &mut g, batch, &mut rng)?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(non_finite(model, self.stage, epoch, b, value));
                }
                g.backward(loss)?;
                model.store.zero_grads();
                g.accumulate_param_grads(&mut model.store);
                adam.step(&mut model.store, &scales);
                apply_running_stats(&mut model.store, &pending, momentum);
                total_loss += value * batch.len() as f64;
                count += batch.len();
            }
            Ok(())
        })();
        *adam_state = adam.state;
        for e in model.store.entries_mut() {
            e.frozen = false;
        }
        model.store.zero_grads();
        result?;
        Ok(total_loss / count as f64)
    }
}

fn non_finite(model: &Model, stage: Stage, epoch: usize, batch: usize, value: f64) -> Error {
    let norms: Vec<String> = model
        .store
        .norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect();
    Error::Numerical(format!(
        "loss {value} in {stage:?} stage, epoch {epoch}, batch {batch}; parameter norms: {}",
        norms.join(", ")
    ))
}

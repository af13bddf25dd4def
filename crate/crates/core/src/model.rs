//! The assembled positioning model: input features, optional feature fusion,
//! the positioning network, optional map fusion. Also batch prediction over
//! trajectories and the per-UE streaming interface.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{CsiMeasurement, Dataset};
use crate::error::{Error, Result};
use crate::features::{designed_features, feature_len, raw_features};
use crate::frontend::{stack_channels, LearnedFrontend};
use crate::fusion::{fuse_maps_conflation, FeatureFusion, FusionConfig, GruInit, MapFusionKind, MapRnn};
use crate::numerics::{CVar, ComplexMatrix, Graph, Mode, ParamStore, Tensor, Var};
use crate::posnet::{PosNet, PosNetConfig};
use crate::probmap::{extract_position, Grid, GridConfig, PositionEstimate};

const INIT_STREAM: u64 = 1 << 60;
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Raw,
    #[default]
    Designed,
    Learned,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Raw, InputMode::Designed, InputMode::Learned];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Designed => "designed",
            InputMode::Learned => "learned",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    #[default]
    None,
    Feature,
    MapRnn,
    MapConflation,
    Combined,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::None,
        FusionKind::Feature,
        FusionKind::MapRnn,
        FusionKind::MapConflation,
        FusionKind::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Feature => "feature",
            FusionKind::MapRnn => "map-rnn",
            FusionKind::MapConflation => "map-conflation",
            FusionKind::Combined => "combined",
        }
    }

    pub fn uses_feature_fusion(self) -> bool {
        matches!(self, FusionKind::Feature | FusionKind::Combined)
    }

    pub fn map_fusion(self, cfg: &FusionConfig) -> Option<MapFusionKind> {
        match self {
            FusionKind::MapRnn => Some(MapFusionKind::Rnn),
            FusionKind::MapConflation => Some(MapFusionKind::Conflation),
            FusionKind::Combined => Some(cfg.map_fusion),
            _ => None,
        }
    }
}

macro_rules! str_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} {s:?}", stringify!($t))))
            }
        }
    };
}

str_enum!(InputMode);
str_enum!(FusionKind);

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m_r: usize,
    pub w: usize,
    pub mode: InputMode,
    pub fusion: FusionKind,
    pub fusion_cfg: FusionConfig,
    pub grid: GridConfig,
    pub posnet: PosNetConfig,
}

impl ModelSpec {
    pub fn input_len(&self) -> usize {
        match self.mode {
            InputMode::Raw => 2 * self.m_r * self.w,
            _ => feature_len(self.m_r, self.w),
        }
    }

    /// Feature window length minus one.
    pub fn delta(&self) -> usize {
        if self.fusion.uses_feature_fusion() {
            self.fusion_cfg.delta
        } else {
            0
        }
    }

    /// Map window length minus one.
    pub fn tau(&self) -> usize {
        if self.map_fusion().is_some() {
            self.fusion_cfg.tau
        } else {
            0
        }
    }

    pub fn map_fusion(&self) -> Option<MapFusionKind> {
        self.fusion.map_fusion(&self.fusion_cfg)
    }

    /// Earlier measurements of the same UE needed before the first output.
    pub fn history(&self) -> usize {
        (self.tau() + 1) * (self.delta() + 1) - 1
    }

    fn has_map_rnn(&self) -> bool {
        self.map_fusion() == Some(MapFusionKind::Rnn) && self.fusion_cfg.tau > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_r == 0 || self.w == 0 {
            return Err(Error::Config("model needs M_R, W > 0".into()));
        }
        self.posnet.validate()?;
        Grid::new(self.grid)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub grid: Grid,
    pub store: ParamStore<f32>,
    pub frontend: Option<LearnedFrontend>,
    pub feature_fusion: Option<FeatureFusion>,
    pub posnet: PosNet,
    pub map_rnn: Option<MapRnn>,
}

/// One output of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Record index in the dataset.
    pub index: usize,
    pub estimate: PositionEstimate,
    /// Map the estimate was extracted from; after conflation, the map of
    /// the newest measurement.
    pub map: Vec<f64>,
}

impl Model {
    /// Fresh parameters. Windows of length one get pass-through feature fusion
    /// and no map network.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let grid = Grid::new(spec.grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let frontend = match spec.mode {
            InputMode::Learned => Some(LearnedFrontend::init(&mut store, spec.m_r, spec.w)?),
            _ => None,
        };
        let posnet = PosNet::init(&mut store, PosNet::PREFIX, spec.input_len(), grid.len(), spec.posnet.clone(), &mut rng)?;
        let mut model = Model {
            spec: spec.clone(),
            grid,
            store,
            frontend,
            feature_fusion: None,
            posnet,
            map_rnn: None,
        };
        model.add_fusion_parts(&mut rng)?;
        Ok(model)
    }

    fn add_fusion_parts(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let spec = &self.spec;
        let variant = spec.fusion_cfg.gru_variant;
        if spec.fusion.uses_feature_fusion() && self.feature_fusion.is_none() {
            let init = if spec.fusion_cfg.delta == 0 {
                GruInit::PassThrough
            } else {
                GruInit::Smoothing {
                    gate_bias: spec.fusion_cfg.feature_gate_bias,
                }
            };
            self.feature_fusion = Some(FeatureFusion::init(&mut self.store, spec.input_len(), variant, init, rng)?);
        }
        if spec.has_map_rnn() && self.map_rnn.is_none() {
            self.map_rnn = Some(MapRnn::init(&mut self.store, self.grid.len(), variant, rng)?);
        }
        Ok(())
    }

    /// Rebuilds the handles for parameters loaded from a checkpoint.
    pub fn from_store(spec: ModelSpec, store: ParamStore<f32>) -> Result<Self> {
        spec.validate()?;
        let grid = Grid::new(spec.grid)?;
        let variant = spec.fusion_cfg.gru_variant;
        let frontend = match spec.mode {
            InputMode::Learned => Some(LearnedFrontend::attach(&store, spec.m_r, spec.w)?),
            _ => None,
        };
        let feature_fusion = if spec.fusion.uses_feature_fusion() {
            Some(FeatureFusion::attach(&store, spec.input_len(), variant)?)
        } else {
            None
        };
        let map_rnn = if spec.has_map_rnn() {
            Some(MapRnn::attach(&store, grid.len(), variant)?)
        } else {
            None
        };
        let posnet = PosNet::attach(&store, PosNet::PREFIX, spec.input_len(), grid.len(), spec.posnet.clone())?;
        Ok(Model {
            spec,
            grid,
            store,
            frontend,
            feature_fusion,
            posnet,
            map_rnn,
        })
    }

    /// Copy of this model with a different fusion kind. Shared parameters are
    /// kept, missing fusion parts are freshly initialized.
    pub fn with_fusion(&self, fusion: FusionKind, fusion_cfg: FusionConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM + 1);
        let mut model = self.clone();
        model.spec.fusion = fusion;
        model.spec.fusion_cfg = fusion_cfg;
        if !fusion.uses_feature_fusion() {
            model.feature_fusion = None;
        }
        if !model.spec.has_map_rnn() {
            model.map_rnn = None;
        }
        if model.feature_fusion.as_ref().is_some_and(|_| self.spec.fusion_cfg.gru_variant != fusion_cfg.gru_variant) {
            return Err(Error::Config("cannot change the GRU variant of an existing model".into()));
        }
        model.add_fusion_parts(&mut rng)?;
        Ok(model)
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.m_r != self.spec.m_r || ds.w != self.spec.w {
            return Err(Error::dim(
                "dataset",
                format!("{}x{} channels for a model built for {}x{}", ds.m_r, ds.w, self.spec.m_r, self.spec.w),
            ));
        }
        Ok(())
    }

    /// Builds the per-measurement input features for a batch of channels
    /// inside `g`. The learned front-end is differentiable, the others are
    /// constants.
    pub fn input_var(&self, g: &mut Graph<f32>, hs: &[&ComplexMatrix<f32>]) -> Result<Var> {
        match &self.frontend {
            Some(fe) => {
                let (re, im) = stack_channels(hs.iter().copied())?;
                let h = CVar {
                    re: g.constant(re),
                    im: g.constant(im),
                };
                fe.forward(g, &self.store, h)
            }
            None => Ok(g.constant(fixed_features(self.spec.mode, hs)?)),
        }
    }

    /// Per-measurement input features `[n, D]`, evaluated in parallel chunks.
    pub fn measurement_features(&self, hs: &[&ComplexMatrix<f32>]) -> Result<Tensor<f32>> {
        let d = self.spec.input_len();
        let parts = hs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let v = self.input_var(&mut g, chunk)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(&[hs.len(), d], parts.concat())
    }

    /// Maps from feature windows, `seq[t]` holding `[n, D]` rows oldest first.
    pub fn maps_from_windows(&self, g: &mut Graph<f32>, seq: &[Var], mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Var, Vec<crate::posnet::PendingStats<f32>>)> {
        let x = match &self.feature_fusion {
            Some(ff) => ff.fuse(g, &self.store, seq)?,
            None => match seq {
                [one] => *one,
                _ => return Err(Error::Contract(format!("{} feature steps without feature fusion", seq.len()))),
            },
        };
        self.posnet.forward(g, &self.store, x, mode, rng)
    }

    /// Eval-mode maps for windows given as row indices into `features`.
    pub fn window_maps(&self, features: &Tensor<f32>, windows: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let k = self.grid.len();
        let parts = windows
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let steps = chunk.first().map_or(0, Vec::len);
                let seq = (0..steps)
                    .map(|t| Ok(g.constant(gather(features, chunk.iter().map(|w| w[t]))?)))
                    .collect::<Result<Vec<_>>>()?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (p, _) = self.maps_from_windows(&mut g, &seq, Mode::Eval, &mut rng)?;
                Ok(g.value(p).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(&[windows.len(), k], parts.concat())
    }

    /// Map-stage output for `maps[j]`, `[n, K]` each, oldest first.
    pub fn fuse_maps(&self, maps: &[Tensor<f32>]) -> Result<Vec<(PositionEstimate, Vec<f64>)>> {
        let k = self.grid.len();
        let n = maps.first().map_or(0, |m| m.shape()[0]);
        let to_f64 = |row: &[f32]| row.iter().map(|&v| v as f64).collect::<Vec<_>>();
        match (&self.map_rnn, self.spec.map_fusion()) {
            (Some(rnn), _) => {
                let mut g = Graph::new();
                let seq: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
                let p = rnn.fuse(&mut g, &self.store, &seq)?;
                g.value(p)
                    .data()
                    .chunks(k)
                    .map(|row| {
                        let row = to_f64(row);
                        Ok((extract_position(&row, &self.grid)?, row))
                    })
                    .collect()
            }
            (None, Some(MapFusionKind::Conflation)) if maps.len() > 1 => (0..n)
                .map(|i| {
                    let rows: Vec<_> = maps.iter().map(|m| to_f64(&m.data()[i * k..(i + 1) * k])).collect();
                    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                    Ok((fuse_maps_conflation(&refs, &self.grid)?, rows.last().cloned().unwrap_or_default()))
                })
                .collect(),
            _ => {
                let last = maps.last().ok_or_else(|| Error::Contract("map fusion of zero maps".into()))?;
                last.data()
                    .chunks(k)
                    .map(|row| {
                        let row = to_f64(row);
                        Ok((extract_position(&row, &self.grid)?, row))
                    })
                    .collect()
            }
        }
    }

    /// Predictions for every record with at least `max(min_history,
    /// history())` earlier records in its trajectory.
    pub fn predict_dataset(&self, ds: &Dataset, min_history: usize) -> Result<Vec<Prediction>> {
        self.check_dataset(ds)?;
        let hs: Vec<_> = ds.records.iter().map(|r| &r.h).collect();
        let features = self.measurement_features(&hs)?;
        let (delta, tau) = (self.spec.delta(), self.spec.tau());
        let stride = delta + 1;
        let need = min_history.max(self.spec.history());

        let mut targets = Vec::new();
        for traj in ds.trajectories() {
            targets.extend(traj.clone().filter(|&t| t - traj.start >= need));
        }
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        // maps[j][i]: map at time targets[i] - (tau - j) * stride.
        let mut maps = Vec::with_capacity(tau + 1);
        for j in 0..=tau {
            let windows: Vec<Vec<usize>> = targets
                .iter()
                .map(|&t| {
                    let end = t - (tau - j) * stride;
                    (end - delta..=end).collect()
                })
                .collect();
            maps.push(self.window_maps(&features, &windows)?);
        }
        let fused = self.fuse_maps(&maps)?;
        Ok(targets
            .into_iter()
            .zip(fused)
            .map(|(index, (estimate, map))| Prediction { index, estimate, map })
            .collect())
    }

    pub fn stream(&self) -> Stream<&Model> {
        Stream::new(self)
    }
}

/// Fixed (non-learned) input features of a batch as `[n, D]`.
pub fn fixed_features(mode: InputMode, hs: &[&ComplexMatrix<f32>]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for h in hs {
        let h64: ComplexMatrix<f64> = h.cast();
        let f = match mode {
            InputMode::Raw => raw_features(&h64)?,
            InputMode::Designed => designed_features(&h64)?,
            InputMode::Learned => return Err(Error::Contract("learned features need the front-end".into())),
        };
        data.extend(f.into_iter().map(|v| v as f32));
    }
    let d = if hs.is_empty() { 0 } else { data.len() / hs.len() };
    Tensor::new(&[hs.len(), d], data)
}

/// Rows of a `[N, D]` tensor.
pub fn gather(t: &Tensor<f32>, rows: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
    let (_, d) = t.dims2()?;
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        n += 1;
    }
    Tensor::new(&[n, d], data)
}

/// Sliding-window state for one UE. `M` is any handle to the model, e.g.
/// `&Model` or `Arc<Model>`.
pub struct Stream<M> {
    model: M,
    ue_id: Option<u32>,
    seen: usize,
    features: VecDeque<Tensor<f32>>,
    maps: VecDeque<Tensor<f32>>,
}

impl<M: std::ops::Deref<Target = Model>> Stream<M> {
    pub fn new(model: M) -> Self {
        Stream {
            model,
            ue_id: None,
            seen: 0,
            features: VecDeque::new(),
            maps: VecDeque::new(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Measurements still needed before the first estimate.
    pub fn warm_up_remaining(&self) -> usize {
        (self.model.spec.history() + 1).saturating_sub(self.seen)
    }

    pub fn reset(&mut self) {
        self.ue_id = None;
        self.seen = 0;
        self.features.clear();
        self.maps.clear();
    }

    /// Feeds one measurement; `None` while the windows are filling up.
    pub fn push(&mut self, m: &CsiMeasurement) -> Result<Option<PositionEstimate>> {
        if *self.ue_id.get_or_insert(m.ue_id) != m.ue_id {
            return Err(Error::Contract(format!(
                "stream for UE {} received a measurement of UE {}",
                self.ue_id.unwrap(),
                m.ue_id
            )));
        }
        let model: &Model = &self.model;
        if m.h.rows() != model.spec.m_r || m.h.cols() != model.spec.w {
            return Err(Error::dim("stream", format!("{}x{} channel", m.h.rows(), m.h.cols())));
        }
        let (delta, tau) = (model.spec.delta(), model.spec.tau());
        let stride = delta + 1;
        self.seen += 1;
        self.features.push_back(model.measurement_features(&[&m.h])?);
        if self.features.len() > stride {
            self.features.pop_front();
        }
        if self.features.len() < stride {
            return Ok(None);
        }
        let mut g = Graph::new();
        let seq: Vec<_> = self.features.iter().map(|f| g.constant(f.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, _) = model.maps_from_windows(&mut g, &seq, Mode::Eval, &mut rng)?;
        self.maps.push_back(g.value(p).clone());
        let span = tau * stride + 1;
        if self.maps.len() > span {
            self.maps.pop_front();
        }
        if self.maps.len() < span {
            return Ok(None);
        }
        let picked: Vec<_> = (0..=tau).map(|j| self.maps[j * stride].clone()).collect();
        let (estimate, _) = model.fuse_maps(&picked)?.pop().expect("one row");
        Ok(Some(estimate))
    }

    /// Like [`Stream::push`], reporting the warm-up as [`Error::NotReady`].
    pub fn push_ready(&mut self, m: &CsiMeasurement) -> Result<PositionEstimate> {
        let need = self.model.spec.history() + 1;
        self.push(m)?.ok_or(Error::NotReady { have: self.seen, need })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::{generate_dataset, Environment, SimConfig, TrajectoryParams};

    fn spec(mode: InputMode, fusion: FusionKind) -> ModelSpec {
        ModelSpec {
            m_r: 2,
            w: 8,
            mode,
            fusion,
            fusion_cfg: FusionConfig {
                delta: 1,
                tau: 2,
                ..Default::default()
            },
            grid: GridConfig::default(),
            posnet: PosNetConfig {
                hidden: vec![16, 16],
                ..Default::default()
            },
        }
    }

    fn data(n: usize) -> Dataset {
        let env = Environment::new(SimConfig {
            num_antennas: 2,
            num_subcarriers: 8,
            ..Default::default()
        })
        .unwrap();
        let tp = TrajectoryParams {
            length: 20,
            ..Default::default()
        };
        generate_dataset(&env, n, 4, &tp).unwrap().0
    }

    #[test]
    fn names_round_trip() {
        for m in InputMode::ALL {
            assert_eq!(m.to_string().parse::<InputMode>().unwrap(), m);
        }
        for f in FusionKind::ALL {
            assert_eq!(f.to_string().parse::<FusionKind>().unwrap(), f);
        }
        assert!(matches!("rnn".parse::<FusionKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn history_arithmetic() {
        let s = spec(InputMode::Designed, FusionKind::Combined);
        assert_eq!((s.delta(), s.tau(), s.history()), (1, 2, 5));
        assert_eq!(spec(InputMode::Designed, FusionKind::Feature).history(), 1);
        assert_eq!(spec(InputMode::Designed, FusionKind::MapRnn).history(), 2);
        assert_eq!(spec(InputMode::Designed, FusionKind::None).history(), 0);
    }

    #[test]
    fn stream_matches_batch_prediction() {
        let ds = data(40);
        for fusion in FusionKind::ALL {
            for mode in [InputMode::Raw, InputMode::Learned] {
                let model = Model::init(spec(mode, fusion), 3).unwrap();
                let batch = model.predict_dataset(&ds, 0).unwrap();
                let mut stream = model.stream();
                let mut streamed = Vec::new();
                for (i, r) in ds.records[..20].iter().enumerate() {
                    if let Some(e) = stream.push(r).unwrap() {
                        streamed.push((i, e));
                    }
                }
                assert_eq!(streamed.len(), 20 - model.spec.history(), "{fusion}");
                assert_eq!(streamed[0].0, model.spec.history());
                for (i, e) in streamed {
                    let b = batch.iter().find(|p| p.index == i).unwrap();
                    for d in 0..2 {
                        assert!((b.estimate.position[d] - e.position[d]).abs() < 1e-5, "{mode} {fusion}");
                    }
                }
                let other = &ds.records[25];
                assert!(matches!(stream.push(other), Err(Error::Contract(_))));
            }
        }
    }

    #[test]
    fn not_ready_during_warm_up() {
        let ds = data(20);
        let model = Model::init(spec(InputMode::Designed, FusionKind::Combined), 1).unwrap();
        let mut s = model.stream();
        for r in &ds.records[..5] {
            assert!(matches!(s.push_ready(r), Err(Error::NotReady { need: 6, .. })));
        }
        assert_eq!(s.warm_up_remaining(), 1);
        assert!(s.push_ready(&ds.records[5]).is_ok());
    }

    #[test]
    fn from_store_and_with_fusion() {
        let base = Model::init(spec(InputMode::Learned, FusionKind::None), 7).unwrap();
        let comb = base.with_fusion(FusionKind::Combined, FusionConfig { map_fusion: MapFusionKind::Rnn, ..Default::default() }, 7).unwrap();
        assert!(comb.feature_fusion.is_some() && comb.map_rnn.is_some());
        let back = Model::from_store(comb.spec.clone(), comb.store.clone()).unwrap();
        assert_eq!(back.posnet, comb.posnet);
        assert!(Model::from_store(comb.spec.clone(), base.store.clone()).is_err());
        let ds = data(20);
        let bad = Dataset { w: 16, ..ds };
        assert!(base.predict_dataset(&bad, 0).is_err());
    }
}

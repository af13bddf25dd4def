//! Positioning network: features in, probability map out.
//!
//! Layer stack: dense, BN, ReLU, dropout; dense, BN, ReLU; then dense + ReLU
//! for the remaining hidden widths; a dense softmax output over the grid.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Graph, Mode, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosNetConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for PosNetConfig {
    fn default() -> Self {
        PosNetConfig {
            hidden: vec![256, 128, 128, 128, 128],
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl PosNetConfig {
    /// Widths used for the full-size network.
    pub fn full_scale() -> Self {
        PosNetConfig {
            hidden: vec![968, 512, 512, 512, 512],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden widths {:?} must be non-empty and positive", self.hidden)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch norm eps must be positive and momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

/// Glorot-uniform weights `[fan_in, fan_out]`, zero bias.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>) -> Result<Self> {
        let (_, out) = w.dims2()?;
        Ok(Dense {
            w: store.add(format!("{name}.weight"), w, ParamKind::Trainable)?,
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::Trainable)?,
        })
    }

    pub fn glorot<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::new(store, name, glorot(fan_in, fan_out, rng))
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = lookup(store, &format!("{name}.weight"), &[fan_in, fan_out])?;
        let b = lookup(store, &format!("{name}.bias"), &[fan_out])?;
        Ok(Dense { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.bind(store, self.w);
        let b = g.bind(store, self.b);
        g.linear(x, w, b)
    }
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id_of(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
    if store.value(id).shape() != shape {
        return Err(Error::dim("parameter", format!("{name} has shape {:?}, want {shape:?}", store.value(id).shape())));
    }
    Ok(id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[d]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[d], T::one()), ParamKind::Buffer)?,
        })
    }

    fn attach<T: Scalar>(store: &ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: lookup(store, &format!("{name}.gamma"), &[d])?,
            beta: lookup(store, &format!("{name}.beta"), &[d])?,
            running_mean: lookup(store, &format!("{name}.running_mean"), &[d])?,
            running_var: lookup(store, &format!("{name}.running_var"), &[d])?,
        })
    }
}

/// Batch statistics awaiting a running-average update.
#[derive(Clone, Debug)]
pub struct PendingStats<T> {
    pub layer: BatchNormLayer,
    pub stats: BatchStats<T>,
}

/// `running = (1 - momentum) running + momentum batch`.
pub fn apply_running_stats<T: Scalar>(store: &mut ParamStore<T>, pending: &[PendingStats<T>], momentum: f64) {
    let mom = T::lit(momentum);
    let keep = T::one() - mom;
    for p in pending {
        for (id, batch) in [(p.layer.running_mean, &p.stats.mean), (p.layer.running_var, &p.stats.var)] {
            for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + mom * b;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosNet {
    pub input: usize,
    pub k: usize,
    pub cfg: PosNetConfig,
    layers: Vec<Dense>,
    bns: Vec<BatchNormLayer>,
}

impl PosNet {
    pub const PREFIX: &'static str = "posnet.";

    fn widths(input: usize, k: usize, cfg: &PosNetConfig) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&cfg.hidden);
        w.push(k);
        w
    }

    fn bn_count(cfg: &PosNetConfig) -> usize {
        cfg.hidden.len().min(2)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        k: usize,
        cfg: PosNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if input == 0 || k < 2 {
            return Err(Error::Config(format!("network input {input} / output {k} invalid")));
        }
        let widths = Self::widths(input, k, &cfg);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::glorot(store, &format!("{prefix}l{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let bns = (0..Self::bn_count(&cfg))
            .map(|i| BatchNormLayer::new(store, &format!("{prefix}bn{i}"), cfg.hidden[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosNet { input, k, cfg, layers, bns })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, input: usize, k: usize, cfg: PosNetConfig) -> Result<Self> {
        let widths = Self::widths(input, k, &cfg);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::attach(store, &format!("{prefix}l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let bns = (0..Self::bn_count(&cfg))
            .map(|i| BatchNormLayer::attach(store, &format!("{prefix}bn{i}"), cfg.hidden[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosNet { input, k, cfg, layers, bns })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Maps `x: [batch, input]` to probabilities `[batch, K]`. Train mode
    /// returns the batch statistics for [`apply_running_stats`].
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<PendingStats<T>>)> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.input {
            return Err(Error::dim("posnet", format!("input width {d}, network expects {}", self.input)));
        }
        let mut h = x;
        let mut pending = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i == last {
                break;
            }
            if let Some(bn) = self.bns.get(i) {
                let gamma = g.bind(store, bn.gamma);
                let beta = g.bind(store, bn.beta);
                let (y, stats) = g.batch_norm(
                    h,
                    gamma,
                    beta,
                    store.value(bn.running_mean).data(),
                    store.value(bn.running_var).data(),
                    T::lit(self.cfg.bn_eps),
                    mode,
                )?;
                h = y;
                if let Some(stats) = stats {
                    pending.push(PendingStats { layer: *bn, stats });
                }
            }
            h = g.relu(h);
            if i == 0 {
                h = g.dropout(h, self.cfg.dropout, mode, rng)?;
            }
        }
        Ok((g.softmax(h), pending))
    }

    /// Eval-mode probability maps for rows of `x`.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (p, _) = self.forward(&mut g, store, xv, Mode::Eval, &mut no_rng)?;
        Ok(g.value(p).clone())
    }
}

/// Mean binary cross-entropy between predicted and reference maps.
pub fn bce_loss<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<T> {
    if p_hat.len() != p.len() {
        return Err(Error::dim("bce", format!("{} vs {}", p_hat.len(), p.len())));
    }
    Ok(crate::numerics::graph::bce_value(p_hat, p))
}

/// Summary of positioning errors in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mde: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub count: usize,
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn error_stats(errors: &[f64]) -> ErrorStats {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    ErrorStats {
        mde: errors.iter().sum::<f64>() / errors.len() as f64,
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        p95: percentile(&sorted, 95.0),
        count: errors.len(),
    }
}

//! Time-series fusion: a GRU over consecutive CSI features, a recurrent
//! network over consecutive probability maps, and Gaussian conflation of the
//! positions extracted from consecutive maps.
//!
//! GRU step (update gate `z`, reset gate `r`):
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! c  = x Wh + (r * h) Uh + bh
//! h' = (1 - z) * h + z * c
//! ```
//!
//! The hidden state starts at zero, so `z = 1` and `c = x` make a single
//! step the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};
use crate::posnet::{glorot, lookup, Dense};
use crate::probmap::{conflate_estimates, extract_position, Grid, PositionEstimate};

/// Update-gate bias used by [`GruInit::PassThrough`]; `sigmoid(40)` rounds to
/// exactly 1 in both precisions.
pub const PASS_THROUGH_GATE_BIAS: f64 = 40.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GruVariant {
    /// Sigmoid gates, identity candidate activation.
    #[default]
    LinearCandidate,
    /// Identity gate activations, tanh candidate.
    LinearGates,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapFusionKind {
    Rnn,
    #[default]
    Conflation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Feature window length minus one.
    pub delta: usize,
    /// Map window length minus one.
    pub tau: usize,
    /// Map fusion used by the combined pipeline.
    pub map_fusion: MapFusionKind,
    pub gru_variant: GruVariant,
    /// Update-gate bias of the trainable feature GRU at initialization.
    pub feature_gate_bias: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            delta: 2,
            tau: 2,
            map_fusion: MapFusionKind::Conflation,
            gru_variant: GruVariant::LinearCandidate,
            feature_gate_bias: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GruInit {
    /// Glorot-uniform weights, zero biases.
    Glorot,
    /// Exact identity for one step from a zero state: `Wh = I`, update gate
    /// saturated open, everything else zero. Needs `input == hidden`.
    PassThrough,
    /// `Wh = I`, `Uh = 0`, Glorot gates with the given update-gate bias.
    /// Starts as exponential smoothing of the inputs.
    Smoothing { gate_bias: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub variant: GruVariant,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl Gru {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        variant: GruVariant,
        init: GruInit,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("GRU widths must be positive".into()));
        }
        if !matches!(init, GruInit::Glorot) && input != hidden {
            return Err(Error::Config(format!("identity-style GRU init needs input == hidden, got {input} vs {hidden}")));
        }
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for (i, gate) in GATES.iter().enumerate() {
            let (wi, ui, bi): (Tensor<T>, Tensor<T>, Tensor<T>) = match (init, i) {
                (GruInit::Glorot, _) | (GruInit::Smoothing { .. }, 0 | 1) => {
                    (glorot(input, hidden, rng), glorot(hidden, hidden, rng), Tensor::zeros(&[hidden]))
                }
                (GruInit::PassThrough, 0 | 1) => (Tensor::zeros(&[input, hidden]), Tensor::zeros(&[hidden, hidden]), Tensor::zeros(&[hidden])),
                _ => (Tensor::identity(hidden), Tensor::zeros(&[hidden, hidden]), Tensor::zeros(&[hidden])),
            };
            let bi = match (init, i) {
                (GruInit::PassThrough, 0) => Tensor::full(&[hidden], T::lit(PASS_THROUGH_GATE_BIAS)),
                (GruInit::Smoothing { gate_bias }, 0) => Tensor::full(&[hidden], T::lit(gate_bias)),
                _ => bi,
            };
            w.push(store.add(format!("{prefix}w{gate}"), wi, ParamKind::Trainable)?);
            u.push(store.add(format!("{prefix}u{gate}"), ui, ParamKind::Trainable)?);
            b.push(store.add(format!("{prefix}b{gate}"), bi, ParamKind::Trainable)?);
        }
        Ok(Gru {
            input,
            hidden,
            variant,
            w: [w[0], w[1], w[2]],
            u: [u[0], u[1], u[2]],
            b: [b[0], b[1], b[2]],
        })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, input: usize, hidden: usize, variant: GruVariant) -> Result<Self> {
        let get = |kind: &str, shape: &[usize]| -> Result<[ParamId; 3]> {
            let ids = GATES
                .iter()
                .map(|g| lookup(store, &format!("{prefix}{kind}{g}"), shape))
                .collect::<Result<Vec<_>>>()?;
            Ok([ids[0], ids[1], ids[2]])
        };
        Ok(Gru {
            input,
            hidden,
            variant,
            w: get("w", &[input, hidden])?,
            u: get("u", &[hidden, hidden])?,
            b: get("b", &[hidden])?,
        })
    }

    fn gate<T: Scalar>(&self, g: &mut Graph<T>, pre: Var) -> Var {
        match self.variant {
            GruVariant::LinearCandidate => g.sigmoid(pre),
            GruVariant::LinearGates => pre,
        }
    }

    fn candidate<T: Scalar>(&self, g: &mut Graph<T>, pre: Var) -> Var {
        match self.variant {
            GruVariant::LinearCandidate => pre,
            GruVariant::LinearGates => g.tanh(pre),
        }
    }

    /// One step. `h = None` is the zero state.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Option<Var>) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.input {
            return Err(Error::dim("gru", format!("input width {d}, cell expects {}", self.input)));
        }
        let mut pre = [x; 3];
        for i in 0..3 {
            let w = g.bind(store, self.w[i]);
            let b = g.bind(store, self.b[i]);
            pre[i] = g.linear(x, w, b)?;
        }
        let Some(h) = h else {
            let z = self.gate(g, pre[0]);
            let c = self.candidate(g, pre[2]);
            return g.mul(z, c);
        };
        let uz = g.bind(store, self.u[0]);
        let ur = g.bind(store, self.u[1]);
        let uh = g.bind(store, self.u[2]);
        let hz = g.matmul(h, uz)?;
        let zp = g.add(pre[0], hz)?;
        let z = self.gate(g, zp);
        let hr = g.matmul(h, ur)?;
        let rp = g.add(pre[1], hr)?;
        let r = self.gate(g, rp);
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, uh)?;
        let cp = g.add(pre[2], rhu)?;
        let c = self.candidate(g, cp);
        let keep = g.affine(z, -T::one(), T::one());
        let old = g.mul(keep, h)?;
        let new = g.mul(z, c)?;
        g.add(old, new)
    }

    /// Final hidden state after the sequence, oldest first.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &[Var]) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Contract("GRU over an empty sequence".into()));
        }
        let mut h = None;
        for &x in seq {
            h = Some(self.step(g, store, x, h)?);
        }
        Ok(h.expect("non-empty"))
    }
}

/// GRU feature fusion with unit-norm output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFusion {
    pub gru: Gru,
}

impl FeatureFusion {
    pub const PREFIX: &'static str = "feature_gru.";

    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, s: usize, variant: GruVariant, init: GruInit, rng: &mut R) -> Result<Self> {
        Ok(FeatureFusion {
            gru: Gru::init(store, Self::PREFIX, s, s, variant, init, rng)?,
        })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, s: usize, variant: GruVariant) -> Result<Self> {
        Ok(FeatureFusion {
            gru: Gru::attach(store, Self::PREFIX, s, s, variant)?,
        })
    }

    /// `seq[t]` is `[batch, S]`, oldest first.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &[Var]) -> Result<Var> {
        let h = self.gru.run(g, store, seq)?;
        g.renormalize(h)
    }
}

/// GRU over maps, three dense ReLU layers of width K, softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRnn {
    pub k: usize,
    pub gru: Gru,
    pub dense: Vec<Dense>,
}

impl MapRnn {
    pub const PREFIX: &'static str = "map_rnn.";
    const HIDDEN: usize = 3;

    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, k: usize, variant: GruVariant, rng: &mut R) -> Result<Self> {
        let gru = Gru::init(store, &format!("{}gru.", Self::PREFIX), k, k, variant, GruInit::Glorot, rng)?;
        let dense = (0..=Self::HIDDEN)
            .map(|i| Dense::glorot(store, &format!("{}l{i}", Self::PREFIX), k, k, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MapRnn { k, gru, dense })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, k: usize, variant: GruVariant) -> Result<Self> {
        let gru = Gru::attach(store, &format!("{}gru.", Self::PREFIX), k, k, variant)?;
        let dense = (0..=Self::HIDDEN)
            .map(|i| Dense::attach(store, &format!("{}l{i}", Self::PREFIX), k, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(MapRnn { k, gru, dense })
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &[Var]) -> Result<Var> {
        let mut h = self.gru.run(g, store, seq)?;
        for (i, layer) in self.dense.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < Self::HIDDEN {
                h = g.relu(h);
            }
        }
        Ok(g.softmax(h))
    }
}

/// Position and covariance of each map, conflated.
pub fn fuse_maps_conflation(maps: &[&[f64]], grid: &Grid) -> Result<PositionEstimate> {
    let estimates = maps
        .iter()
        .map(|p| extract_position(p, grid))
        .collect::<Result<Vec<_>>>()?;
    conflate_estimates(&estimates)
}

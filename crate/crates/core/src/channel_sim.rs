//! Synthetic CSI: geometric multipath to a uniform linear array, hardware
//! impairments, and bounded-speed UE trajectories.
//!
//! The access point sits at `ap_position` with its array axis along x and
//! boresight along +y. Path angles are measured from boresight.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Stream offsets keep scatterer, trajectory and per-measurement draws
/// independent of each other.
const STREAM_SCATTERERS: u64 = 1 << 62;
const STREAM_TRAJECTORY: u64 = 1 << 61;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Impairments {
    /// Uniform random phase rotation of the whole matrix.
    pub global_phase: bool,
    /// Maximum timing offset in samples; drawn uniformly in `[-max, max]`.
    pub timing_offset_max: f64,
    /// Standard deviation of the per-antenna gain, in dB.
    pub per_antenna_gain_jitter_db: f64,
}

impl Default for Impairments {
    fn default() -> Self {
        Impairments {
            global_phase: true,
            timing_offset_max: 2.0,
            per_antenna_gain_jitter_db: 1.0,
        }
    }
}

impl Impairments {
    pub fn none() -> Self {
        Impairments {
            global_phase: false,
            timing_offset_max: 0.0,
            per_antenna_gain_jitter_db: 0.0,
        }
    }
}

/// Simulator settings. Impairment statistics and the scatterer model are
/// simulator choices, not measured hardware values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    /// Area `[0, width] x [0, height]`, meters.
    pub area: [f64; 2],
    /// Total number of propagation paths, including the direct one when `los`.
    pub num_paths: usize,
    pub los: bool,
    /// Signal-to-noise ratio in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub impairments: Impairments,
    /// Element spacing in carrier wavelengths.
    pub antenna_spacing: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub ap_position: [f64; 2],
    /// Scatterers are placed uniformly in the area grown by this margin.
    pub scatterer_margin: f64,
    /// Range of scatterer reflection magnitudes.
    pub reflection: [f64; 2],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_antennas: 4,
            num_subcarriers: 64,
            area: [4.0, 4.0],
            num_paths: 5,
            los: true,
            snr_db: Some(20.0),
            impairments: Impairments::default(),
            antenna_spacing: 0.5,
            carrier_hz: 5.25e9,
            bandwidth_hz: 80e6,
            ap_position: [2.0, -1.0],
            scatterer_margin: 2.0,
            reflection: [0.2, 0.6],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_antennas < 1 {
            return bad("num_antennas must be >= 1".into());
        }
        if self.num_subcarriers < 2 {
            return bad("num_subcarriers must be >= 2".into());
        }
        if self.num_paths < 1 {
            return bad("num_paths must be >= 1".into());
        }
        if !(self.area[0] > 0.0 && self.area[1] > 0.0) {
            return bad(format!("area {:?} must be positive", self.area));
        }
        if !(self.carrier_hz > 0.0 && self.bandwidth_hz > 0.0 && self.antenna_spacing > 0.0) {
            return bad("carrier, bandwidth and antenna spacing must be positive".into());
        }
        let r = self.reflection;
        if !(0.0 <= r[0] && r[0] <= r[1]) {
            return bad(format!("reflection range {r:?} invalid"));
        }
        let imp = &self.impairments;
        if !(imp.timing_offset_max >= 0.0 && imp.per_antenna_gain_jitter_db >= 0.0) {
            return bad("impairment magnitudes must be non-negative".into());
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return bad("snr_db must be finite (omit it for a noiseless channel)".into());
            }
        }
        if self.inside(self.ap_position) {
            return bad("access point must lie outside the area".into());
        }
        Ok(())
    }

    fn inside(&self, x: [f64; 2]) -> bool {
        (0..2).all(|d| x[d] >= 0.0 && x[d] <= self.area[d])
    }

    /// Subcarrier frequencies `f_c + (w - W/2) B / W`.
    pub fn subcarrier_hz(&self, w: usize) -> f64 {
        let n = self.num_subcarriers as f64;
        self.carrier_hz + (w as f64 - n / 2.0) * self.bandwidth_hz / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scatterer {
    pub position: [f64; 2],
    pub reflection: Complex<f64>,
}

/// Fixed propagation environment derived from the configuration seed.
#[derive(Clone, Debug)]
pub struct Environment {
    cfg: SimConfig,
    scatterers: Vec<Scatterer>,
}

#[derive(Clone, Copy, Debug)]
struct Path {
    gain: Complex<f64>,
    delay: f64,
    sin_aoa: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Environment {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_SCATTERERS);
        let count = cfg.num_paths - usize::from(cfg.los);
        let m = cfg.scatterer_margin;
        let scatterers = (0..count)
            .map(|_| {
                // Keep scatterers off the array itself.
                let position = loop {
                    let p = [
                        rng.random_range(-m..cfg.area[0] + m),
                        rng.random_range(-m..cfg.area[1] + m),
                    ];
                    if dist(p, cfg.ap_position) > 0.5 {
                        break p;
                    }
                };
                let mag = rng.random_range(cfg.reflection[0]..=cfg.reflection[1]);
                let phase = rng.random_range(0.0..2.0 * PI);
                Scatterer {
                    position,
                    reflection: Complex::from_polar(mag, phase),
                }
            })
            .collect();
        Ok(Environment { cfg, scatterers })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        &self.scatterers
    }

    fn paths(&self, x: [f64; 2]) -> Vec<Path> {
        let ap = self.cfg.ap_position;
        let sin_from = |p: [f64; 2]| (p[0] - ap[0]) / dist(p, ap);
        let mut paths = Vec::with_capacity(self.cfg.num_paths);
        if self.cfg.los {
            let d = dist(x, ap);
            paths.push(Path {
                gain: Complex::new(1.0 / d, 0.0),
                delay: d / SPEED_OF_LIGHT,
                sin_aoa: sin_from(x),
            });
        }
        for s in &self.scatterers {
            let d = dist(x, s.position) + dist(s.position, ap);
            paths.push(Path {
                gain: s.reflection / d,
                delay: d / SPEED_OF_LIGHT,
                sin_aoa: sin_from(s.position),
            });
        }
        paths
    }

    /// Impairment-free channel at `x`.
    pub fn clean_channel(&self, x: [f64; 2]) -> Result<ComplexMatrix<f64>> {
        if !x.iter().all(|v| v.is_finite()) || !self.cfg.inside(x) {
            return Err(Error::Domain(format!("position {x:?} outside area {:?}", self.cfg.area)));
        }
        let cfg = &self.cfg;
        let paths = self.paths(x);
        let freqs: Vec<f64> = (0..cfg.num_subcarriers).map(|w| cfg.subcarrier_hz(w)).collect();
        Ok(ComplexMatrix::from_fn(cfg.num_antennas, cfg.num_subcarriers, |m, w| {
            paths
                .iter()
                .map(|p| {
                    let steer = -2.0 * PI * m as f64 * cfg.antenna_spacing * p.sin_aoa;
                    let delay = -2.0 * PI * freqs[w] * p.delay;
                    p.gain * Complex::from_polar(1.0, steer + delay)
                })
                .sum()
        }))
    }

    /// One measured channel at `x`: impairments then noise, all drawn from `rng`.
    pub fn synthesize<R: Rng + ?Sized>(&self, x: [f64; 2], rng: &mut R) -> Result<ComplexMatrix<f64>> {
        let mut h = self.clean_channel(x)?;
        let cfg = &self.cfg;
        let (m_r, w_n) = (cfg.num_antennas, cfg.num_subcarriers);
        let imp = &cfg.impairments;
        // Draw every random quantity unconditionally so toggling one
        // impairment does not shift the others' random streams.
        let gains_db: Vec<f64> = (0..m_r).map(|_| StandardNormal.sample(rng)).collect();
        let eps: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);

        let eps = eps * imp.timing_offset_max;
        let rot = if imp.global_phase { Complex::from_polar(1.0, phi) } else { Complex::new(1.0, 0.0) };
        for m in 0..m_r {
            let g = 10f64.powf(imp.per_antenna_gain_jitter_db * gains_db[m] / 20.0);
            for w in 0..w_n {
                let ramp = Complex::from_polar(1.0, -2.0 * PI * w as f64 * eps / w_n as f64);
                h.set(m, w, h.get(m, w) * g * ramp * rot);
            }
        }
        if let Some(snr) = cfg.snr_db {
            let signal = h.frobenius_sq() / (m_r * w_n) as f64;
            let sigma = (signal / 10f64.powf(snr / 10.0) / 2.0).sqrt();
            for m in 0..m_r {
                for w in 0..w_n {
                    let n = Complex::new(StandardNormal.sample(rng), StandardNormal.sample(rng)) * sigma;
                    h.set(m, w, h.get(m, w) + n);
                }
            }
        }
        if !h.is_finite() {
            return Err(Error::Numerical(format!("non-finite channel at {x:?}")));
        }
        Ok(h)
    }

    /// Deterministic per-measurement random stream.
    pub fn measurement_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiMeasurement {
    pub h: ComplexMatrix<f32>,
    pub position: [f32; 2],
    pub timestamp: f64,
    pub ue_id: u32,
}

impl CsiMeasurement {
    pub fn position_f64(&self) -> [f64; 2] {
        [self.position[0] as f64, self.position[1] as f64]
    }
}

/// Measurements in trajectory order; consecutive records with the same
/// `ue_id` form one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub m_r: usize,
    pub w: usize,
    pub records: Vec<CsiMeasurement>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index ranges of the trajectories.
    pub fn trajectories(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].ue_id != self.records[start].ue_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            m_r: self.m_r,
            w: self.w,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryParams {
    /// Samples per trajectory.
    pub length: usize,
    /// Sampling interval, seconds.
    pub interval: f64,
    pub speed_max: f64,
    /// Standard deviation of the per-step velocity change, m/s.
    pub accel_std: f64,
    /// Region the UE moves in; must lie inside the simulation area.
    pub region_min: [f64; 2],
    pub region_max: [f64; 2],
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            length: 200,
            interval: 0.1,
            speed_max: 0.25,
            accel_std: 0.05,
            region_min: [0.25, 0.25],
            region_max: [3.75, 3.75],
        }
    }
}

fn reflect(mut x: f64, v: &mut f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        x = 2.0 * lo - x;
        *v = -*v;
    }
    if x > hi {
        x = 2.0 * hi - x;
        *v = -*v;
    }
    x.clamp(lo, hi)
}

/// Positions of one bounded-speed random walk.
pub fn random_walk<R: Rng + ?Sized>(tp: &TrajectoryParams, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let (lo, hi) = (tp.region_min, tp.region_max);
    let mut x = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
    let heading = rng.random_range(0.0..2.0 * PI);
    let speed = rng.random_range(0.0..=tp.speed_max);
    let mut v = [speed * heading.cos(), speed * heading.sin()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        // Round to the stored precision so labels match the simulated point.
        out.push([x[0] as f32 as f64, x[1] as f32 as f64]);
        for vd in v.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *vd += tp.accel_std * n;
        }
        let s = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if s > tp.speed_max {
            v[0] *= tp.speed_max / s;
            v[1] *= tp.speed_max / s;
        }
        for d in 0..2 {
            x[d] = reflect(x[d] + v[d] * tp.interval, &mut v[d], lo[d], hi[d]);
        }
    }
    out
}

impl TrajectoryParams {
    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length == 0 {
            return bad("trajectory length must be positive".into());
        }
        if !(self.interval > 0.0 && self.speed_max >= 0.0 && self.accel_std >= 0.0) {
            return bad("trajectory interval must be positive and speeds non-negative".into());
        }
        for d in 0..2 {
            if !(self.region_min[d] < self.region_max[d]) {
                return bad(format!("trajectory region {:?}..{:?} is empty", self.region_min, self.region_max));
            }
            if self.region_min[d] < 0.0 || self.region_max[d] > cfg.area[d] {
                return bad(format!(
                    "trajectory region {:?}..{:?} exceeds area {:?}",
                    self.region_min, self.region_max, cfg.area
                ));
            }
        }
        Ok(())
    }
}

/// Train and test sets from disjoint random trajectories.
pub fn generate_dataset(
    env: &Environment,
    num_train: usize,
    num_test: usize,
    tp: &TrajectoryParams,
) -> Result<(Dataset, Dataset)> {
    if num_train == 0 || num_test == 0 {
        return Err(Error::Config("dataset counts must be positive".into()));
    }
    tp.validate(env.config())?;
    let mut next_ue = 0u32;
    let mut next_index = 0u64;
    let mut build = |count: usize| -> Result<Dataset> {
        let mut plan = Vec::with_capacity(count);
        while plan.len() < count {
            let n = tp.length.min(count - plan.len());
            let mut rng = ChaCha8Rng::seed_from_u64(env.config().seed);
            rng.set_stream(STREAM_TRAJECTORY + next_ue as u64);
            for (i, x) in random_walk(tp, n, &mut rng).into_iter().enumerate() {
                plan.push((next_index, next_ue, i as f64 * tp.interval, x));
                next_index += 1;
            }
            next_ue += 1;
        }
        let records = plan
            .into_par_iter()
            .map(|(index, ue_id, timestamp, x)| {
                let h = env.synthesize(x, &mut env.measurement_rng(index))?;
                Ok(CsiMeasurement {
                    h: h.cast(),
                    position: [x[0] as f32, x[1] as f32],
                    timestamp,
                    ue_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            m_r: env.config().num_antennas,
            w: env.config().num_subcarriers,
            records,
        })
    };
    let train = build(num_train)?;
    let test = build(num_test)?;
    Ok((train, test))
}

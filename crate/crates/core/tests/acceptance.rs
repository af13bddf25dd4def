//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances and runtime budgets are fixed below.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csi_locate::channel_sim::{CsiMeasurement, Dataset};
use csi_locate::config::ExperimentConfig;
use csi_locate::experiment::{self, column, median, replicate_cells};
use csi_locate::features::designed_features;
use csi_locate::frontend::{lag_permutation, stack_channels, LearnedFrontend};
use csi_locate::fusion::{FeatureFusion, FusionConfig, GruInit, GruVariant, MapFusionKind, MapRnn};
use csi_locate::io::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use csi_locate::model::{FusionKind, InputMode, Model};
use csi_locate::numerics::gradcheck::{check_params, GradCheckReport};
use csi_locate::numerics::{CVar, ComplexMatrix, Graph, Mode, ParamKind, ParamStore, Tensor, Var};
use csi_locate::posnet::{PosNet, PosNetConfig};
use csi_locate::probmap::{conflate, extract_position, is_valid_map, reference_map, Grid, GridConfig, PositionEstimate};
use csi_locate::train::{train, LrSchedule, Progress, TrainConfig};
use csi_locate::{Error, Result};

const ORACLE_TOL_F32: f64 = 1e-5;
const ORACLE_TOL_F64: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const PHASE_TOL: f64 = 1e-6;
const SCALE_TOL: f64 = 1e-12;
const MAP_SUM_TOL: f64 = 1e-6;
const ROUND_TRIP_TOL: f64 = 1e-9;
const CONFLATION_TOL: f64 = 1e-12;
const SMOKE_MDE: f64 = 0.5;
const SLACK: f64 = 1.10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random_channel(m: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix<f64> {
    ComplexMatrix::from_fn(m, w, |_, _| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Designed features computed from first principles: explicit inverse DFT
/// over the subcarriers, the lag double sum with zero extension, column-major
/// `[Re; Im]` stacking and unit norm.
fn oracle_features(h: &ComplexMatrix<f64>) -> Vec<f64> {
    let (m, w) = (h.rows(), h.cols());
    let mut x = vec![vec![Complex::new(0.0, 0.0); w]; m];
    for (r, row) in x.iter_mut().enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            for k in 0..w {
                *v += h.get(r, k) * Complex::from_polar(1.0 / (w as f64).sqrt(), 2.0 * PI * (k * t) as f64 / w as f64);
            }
        }
    }
    let (rows, cols) = (2 * m, 2 * w);
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let a = i as isize + 1 - m as isize;
            let b = j as isize + 1 - w as isize;
            let mut acc = Complex::new(0.0, 0.0);
            for p in 0..m as isize {
                for q in 0..w as isize {
                    let (p2, q2) = (p + a, q + b);
                    if (0..m as isize).contains(&p2) && (0..w as isize).contains(&q2) {
                        acc += x[p as usize][q as usize] * x[p2 as usize][q2 as usize].conj();
                    }
                }
            }
            re[j * rows + i] = acc.re;
            im[j * rows + i] = acc.im;
        }
    }
    re.extend(im);
    let n = re.iter().map(|v| v * v).sum::<f64>().sqrt();
    re.iter().map(|v| v / n).collect()
}

fn c1_oracle_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shapes: Vec<(usize, usize)> = [1, 2, 4].iter().flat_map(|&m| [8, 16, 32].map(|w| (m, w))).collect();
    let (mut d32, mut d64, mut d_designed) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let (m, w) = shapes[i % shapes.len()];
        let h = random_channel(m, w, &mut rng);
        let oracle = oracle_features(&h);
        let designed = designed_features(&h)?;
        d_designed = d_designed.max(max_abs_diff(&designed, &oracle));

        let perm = lag_permutation(m, w);
        let mut s64 = ParamStore::<f64>::new();
        let fe64 = LearnedFrontend::init(&mut s64, m, w)?;
        let l64 = fe64.features(&s64, &h)?;
        let mut s32 = ParamStore::<f32>::new();
        let fe32 = LearnedFrontend::init(&mut s32, m, w)?;
        let l32 = fe32.features(&s32, &h.cast())?;
        for (k, &o) in oracle.iter().enumerate() {
            d64 = d64.max((l64[perm[k]] - o).abs());
            d32 = d32.max((l32[perm[k]] as f64 - o).abs());
        }
    }
    outcome(
        d32 < ORACLE_TOL_F32 && d64 < ORACLE_TOL_F64 && d_designed < ORACLE_TOL_F64,
        format!("max|learned-oracle| f32 {d32:.2e}, f64 {d64:.2e}; max|designed-oracle| {d_designed:.2e}"),
    )
}

/// Runs a gradient check, redrawing the random point while a ReLU input lies
/// within 10 steps of its kink.
fn grad_check(name: &str, mut attempt: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>, log: &mut Vec<String>) -> Result<bool> {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = attempt(&mut rng)?;
        if r.relu_margin.is_some_and(|m| m <= 10.0 * GRAD_STEP) {
            continue;
        }
        let ok = r.max_rel_error < GRAD_TOL;
        if !ok {
            log.push(format!("{name} {:.1e} at {:?}", r.max_rel_error, r.worst));
        }
        return Ok(ok);
    }
    log.push(format!("{name}: no kink-free point"));
    Ok(false)
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    fn sq_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
        let s = g.mul(v, v)?;
        Ok(g.sum(s))
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            sq_sum(g, y)
        }),
        ("matmul_ext", vec![vec![4, 3], vec![2, 4]], |g, v| {
            let y = g.matmul_ext(v[0], v[1], true, true, -0.6)?;
            sq_sum(g, y)
        }),
        ("linear", vec![vec![5, 3], vec![3, 4], vec![4]], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            sq_sum(g, y)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(a, b)?;
            Ok(g.sum(c))
        }),
        ("affine_scale", vec![vec![3, 2]], |g, v| {
            let a = g.affine(v[0], -1.5, 0.3);
            let b = g.scale(a, 2.5);
            let c = g.mul(a, b)?;
            Ok(g.sum(c))
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            sq_sum(g, y)
        }),
        ("relu", vec![vec![4, 4]], |g, v| {
            let y = g.relu(v[0]);
            let z = g.affine(y, 1.0, 0.5);
            sq_sum(g, z)
        }),
        ("sigmoid", vec![vec![3, 3]], |g, v| {
            let y = g.sigmoid(v[0]);
            sq_sum(g, y)
        }),
        ("tanh", vec![vec![3, 3]], |g, v| {
            let y = g.tanh(v[0]);
            sq_sum(g, y)
        }),
        ("softmax", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let p = g.softmax(v[0]);
            let d = g.mul(p, v[1])?;
            sq_sum(g, d)
        }),
        ("l2_normalize", vec![vec![2, 6], vec![2, 6]], |g, v| {
            let n = g.l2_normalize(v[0])?;
            let d = g.mul(n, v[1])?;
            Ok(g.sum(d))
        }),
        ("renormalize", vec![vec![2, 6], vec![2, 6]], |g, v| {
            let n = g.renormalize(v[0])?;
            let d = g.mul(n, v[1])?;
            Ok(g.sum(d))
        }),
        ("abs_squared", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let a = g.abs_squared(CVar { re: v[0], im: v[1] })?;
            sq_sum(g, a)
        }),
        ("mul_const", vec![vec![2, 2]], |g, v| {
            let y = g.mul_const(v[0], vec![0.0, 2.0, -1.0, 0.5])?;
            sq_sum(g, y)
        }),
        ("dropout", vec![vec![4, 5]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y = g.dropout(v[0], 0.5, Mode::Train, &mut rng)?;
            sq_sum(g, y)
        }),
        ("batch_norm_train", vec![vec![6, 3], vec![3], vec![3], vec![6, 3]], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train)?;
            let d = g.mul(y, v[3])?;
            Ok(g.sum(d))
        }),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3], vec![4, 3]], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.1, 0.2, -0.1], &[0.5, 2.0, 1.0], 1e-5, Mode::Eval)?;
            let d = g.mul(y, v[3])?;
            Ok(g.sum(d))
        }),
        ("layout", vec![vec![2, 3, 4], vec![3, 5, 6]], |g, v| {
            let a = g.swap_leading(v[0])?;
            let b = g.transpose_inner(a)?;
            let c = g.zero_pad(b, 5, 6)?;
            let r = g.reshape(c, &[3, 5, 6])?;
            let d = g.mul(r, v[1])?;
            sq_sum(g, d)
        }),
        ("concat_last", vec![vec![2, 3], vec![2, 2], vec![2, 5]], |g, v| {
            let c = g.concat_last(v[0], v[1])?;
            let d = g.mul(c, v[2])?;
            sq_sum(g, d)
        }),
        ("cmatmul", vec![vec![3, 2], vec![3, 2], vec![3, 4], vec![3, 4]], |g, v| {
            let c = g.cmatmul(CVar { re: v[0], im: v[1] }, CVar { re: v[2], im: v[3] }, true, false)?;
            let d = g.cmatmul(c, c, false, true)?;
            let e = g.abs_squared(d)?;
            Ok(g.sum(e))
        }),
        ("rcmatmul", vec![vec![3, 4], vec![5, 4], vec![5, 4]], |g, v| {
            let c = g.rcmatmul(v[0], CVar { re: v[1], im: v[2] }, true)?;
            let e = g.abs_squared(c)?;
            Ok(g.sum(e))
        }),
        ("cmatmul_left_batched", vec![vec![3, 2], vec![3, 2], vec![2, 3, 4], vec![2, 3, 4]], |g, v| {
            let y = g.cmatmul_left_batched(CVar { re: v[0], im: v[1] }, CVar { re: v[2], im: v[3] }, true)?;
            let e = g.abs_squared(y)?;
            Ok(g.sum(e))
        }),
        ("bce", vec![vec![2, 4]], |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &[0.0, 0.3, 0.7, 0.0, 1.0, 0.0, 0.0, 0.0])
        }),
    ]
}

fn randomize(store: &mut ParamStore<f64>, pick: impl Fn(&str) -> bool, lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if pick(&store.entry(id).name) {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(lo..hi);
            }
        }
    }
}

fn c2_gradients() -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut checked = 0;
    for (name, shapes, build) in op_cases() {
        let ok = grad_check(name, |rng| {
            let mut store = ParamStore::<f64>::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("p{i}"), random_tensor(s, rng), ParamKind::Trainable))
                .collect::<Result<_>>()?;
            check_params(&mut store, |g, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.bind(s, id)).collect();
                build(g, &vars)
            }, GRAD_STEP, 64, rng)
        }, &mut failures)?;
        checked += ok as usize;
    }
    let n_ops = op_cases().len();

    let k = 6;
    let posnet_ok = grad_check("posnet", |rng| {
        let mut s = ParamStore::<f64>::new();
        let net = PosNet::init(&mut s, "posnet.", 5, k, PosNetConfig { hidden: vec![8, 8, 8], ..Default::default() }, rng)?;
        randomize(&mut s, |n| n.contains("running") || n.ends_with("bias") || n.ends_with("beta"), 0.5, 1.5, rng);
        let x = random_tensor(&[4, 5], rng);
        let target: Vec<f64> = (0..4 * k).map(|i| if i % k == 2 { 1.0 } else { 0.0 }).collect();
        check_params(&mut s, |g, s| {
            let xv = g.constant(x.clone());
            let (p, _) = net.forward(g, s, xv, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            g.bce(p, &target)
        }, GRAD_STEP, 40, rng)
    }, &mut failures)?;

    let frontend_ok = grad_check("frontend", |rng| {
        let (m, w) = (2, 4);
        let mut s = ParamStore::<f64>::new();
        let fe = LearnedFrontend::init(&mut s, m, w)?;
        randomize(&mut s, |_| true, -0.8, 0.8, rng);
        let hs: Vec<_> = (0..2).map(|_| random_channel(m, w, rng)).collect();
        let (re, im) = stack_channels(&hs)?;
        let weights = random_tensor(&[2, 8 * m * w], rng);
        check_params(&mut s, |g, s| {
            let x = CVar { re: g.constant(re.clone()), im: g.constant(im.clone()) };
            let f = fe.forward(g, s, x)?;
            let d = g.mul_const(f, weights.data().to_vec())?;
            Ok(g.sum(d))
        }, GRAD_STEP, 32, rng)
    }, &mut failures)?;

    let end_to_end_ok = grad_check("frontend+posnet+bce", |rng| {
        let (m, w) = (1, 4);
        let mut s = ParamStore::<f64>::new();
        let fe = LearnedFrontend::init(&mut s, m, w)?;
        let net = PosNet::init(&mut s, "posnet.", 8 * m * w, k, PosNetConfig { hidden: vec![8, 8], ..Default::default() }, rng)?;
        randomize(&mut s, |n| n.contains("running") || n.ends_with("bias") || n.ends_with("beta"), 0.5, 1.5, rng);
        let hs: Vec<_> = (0..3).map(|_| random_channel(m, w, rng)).collect();
        let (re, im) = stack_channels(&hs)?;
        let target: Vec<f64> = (0..3 * k).map(|i| if i % k == 4 { 1.0 } else { 0.0 }).collect();
        check_params(&mut s, |g, s| {
            let x = CVar { re: g.constant(re.clone()), im: g.constant(im.clone()) };
            let f = fe.forward(g, s, x)?;
            let (p, _) = net.forward(g, s, f, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            g.bce(p, &target)
        }, GRAD_STEP, 24, rng)
    }, &mut failures)?;

    let mut gru_ok = true;
    for variant in [GruVariant::LinearCandidate, GruVariant::LinearGates] {
        gru_ok &= grad_check(&format!("feature GRU {variant:?}"), |rng| {
            let mut s = ParamStore::<f64>::new();
            let ff = FeatureFusion::init(&mut s, 5, variant, GruInit::Glorot, rng)?;
            randomize(&mut s, |n| n.contains(".b"), -0.5, 0.5, rng);
            let xs: Vec<_> = (0..3).map(|_| random_tensor(&[2, 5], rng)).collect();
            let weights = random_tensor(&[2, 5], rng);
            check_params(&mut s, |g, s| {
                let seq: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
                let out = ff.fuse(g, s, &seq)?;
                let d = g.mul_const(out, weights.data().to_vec())?;
                Ok(g.sum(d))
            }, GRAD_STEP, 25, rng)
        }, &mut failures)?;
    }

    let rnn_ok = grad_check("map RNN", |rng| {
        let mut s = ParamStore::<f64>::new();
        let rnn = MapRnn::init(&mut s, k, GruVariant::LinearCandidate, rng)?;
        randomize(&mut s, |n| n.contains("bias") || n.contains(".b"), 0.1, 0.6, rng);
        let maps: Vec<_> = (0..3)
            .map(|_| {
                let mut t = random_tensor(&[2, k], rng);
                for row in t.data_mut().chunks_mut(k) {
                    row.iter_mut().for_each(|v| *v = v.abs() + 0.05);
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                t
            })
            .collect();
        let target: Vec<f64> = (0..2 * k).map(|i| if i % k == 1 { 1.0 } else { 0.0 }).collect();
        check_params(&mut s, |g, s| {
            let seq: Vec<_> = maps.iter().map(|x| g.constant(x.clone())).collect();
            let p = rnn.fuse(g, s, &seq)?;
            g.bce(p, &target)
        }, GRAD_STEP, 20, rng)
    }, &mut failures)?;

    let pass = checked == n_ops && posnet_ok && frontend_ok && end_to_end_ok && gru_ok && rnn_ok;
    let detail = if failures.is_empty() {
        format!("{n_ops} ops, posnet, front-end, end-to-end, feature GRU x2, map RNN all below {GRAD_TOL:e}")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn c3_invariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut phase, mut scale) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let (m, w) = ([1, 2, 4][i % 3], [4, 8, 16][(i / 3) % 3]);
        let h = random_channel(m, w, &mut rng);
        let rot = Complex::from_polar(1.0, rng.random_range(-PI..PI));
        let c = Complex::new(10f64.powf(rng.random_range(-3.0..3.0)), 0.0);
        let mul = |z: Complex<f64>| ComplexMatrix::from_fn(m, w, |r, k| h.get(r, k) * z);

        let f = designed_features(&h)?;
        phase = phase.max(max_abs_diff(&f, &designed_features(&mul(rot))?));
        scale = scale.max(max_abs_diff(&f, &designed_features(&mul(c))?));

        // Arbitrary, non-DFT front-end weights.
        let mut s = ParamStore::<f64>::new();
        let fe = LearnedFrontend::init(&mut s, m, w)?;
        randomize(&mut s, |_| true, -1.0, 1.0, &mut rng);
        let l = fe.features(&s, &h)?;
        phase = phase.max(max_abs_diff(&l, &fe.features(&s, &mul(rot))?));
        scale = scale.max(max_abs_diff(&l, &fe.features(&s, &mul(c))?));
    }

    let k = GridConfig::default().rows * GridConfig::default().cols;
    let (mut forwards, mut bad) = (0usize, 0usize);
    for i in 0..100 {
        let mut s = ParamStore::<f64>::new();
        let net = PosNet::init(&mut s, "posnet.", 16, k, PosNetConfig { hidden: vec![32, 32, 32], ..Default::default() }, &mut rng)?;
        let rnn = MapRnn::init(&mut s, k, GruVariant::LinearCandidate, &mut rng)?;
        let spread = 10f64.powi(i % 4);
        let x = Tensor::new(&[50, 16], (0..800).map(|_| rng.random_range(-spread..spread)).collect())?;
        let p = net.predict(&s, x)?;
        let mut g = Graph::new();
        let seq: Vec<_> = (0..3).map(|_| g.constant(p.clone())).collect();
        let fused = rnn.fuse(&mut g, &s, &seq)?;
        for t in [&p, g.value(fused)] {
            for row in t.data().chunks(k) {
                forwards += 1;
                bad += !is_valid_map(row, MAP_SUM_TOL) as usize;
            }
        }
    }
    outcome(
        phase < PHASE_TOL && scale < SCALE_TOL && bad == 0 && forwards >= 10_000,
        format!("phase {phase:.2e}, scale {scale:.2e}; {bad} invalid of {forwards} maps"),
    )
}

fn c4_round_trip() -> Result<Outcome> {
    let grid = Grid::new(GridConfig::default())?;
    let (lo, hi) = grid.hull();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pts: Vec<[f64; 2]> = (0..10_000 - 4)
        .map(|_| [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])])
        .collect();
    pts.extend([lo, hi, [lo[0], hi[1]], [hi[0], lo[1]]]);
    let mut worst = 0.0f64;
    let mut invalid = 0;
    for x in &pts {
        let p = reference_map(*x, &grid)?;
        invalid += !is_valid_map(&p, 1e-12) as usize;
        let e = extract_position(&p, &grid)?;
        worst = worst.max((e.position[0] - x[0]).hypot(e.position[1] - x[1]));
    }
    outcome(
        worst < ROUND_TRIP_TOL && invalid == 0,
        format!("{} positions, max error {worst:.2e} m, {invalid} invalid maps", pts.len()),
    )
}

fn estimate(x: f64, y: f64, vx: f64, vy: f64) -> PositionEstimate {
    PositionEstimate {
        position: [x, y],
        covariance: [[vx, 0.0], [0.0, vy]],
    }
}

fn c5_conflation() -> Result<Outcome> {
    let single = conflate(&[estimate(1.3, -0.7, 0.2, 0.4)])?;
    let equal = conflate(&[estimate(0.0, 0.0, 1.0, 1.0), estimate(1.0, 1.0, 1.0, 1.0)])?;
    let weighted = conflate(&[estimate(0.0, 0.0, 1.0, 1.0), estimate(1.0, 1.0, 3.0, 3.0)])?;
    let examples = single == [1.3, -0.7] && equal == [0.5, 0.5] && weighted == [0.25, 0.25];

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut hull_bad, mut scale_dev, mut oracle_dev) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let est: Vec<_> = (0..n)
            .map(|_| {
                estimate(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(1e-3..4.0),
                    rng.random_range(1e-3..4.0),
                )
            })
            .collect();
        let c = conflate(&est)?;
        for d in 0..2 {
            let lo = est.iter().map(|e| e.position[d]).fold(f64::INFINITY, f64::min);
            let hi = est.iter().map(|e| e.position[d]).fold(f64::NEG_INFINITY, f64::max);
            hull_bad += !(lo <= c[d] && c[d] <= hi) as usize;
            let (num, den) = est.iter().fold((0.0, 0.0), |(a, b), e| {
                (a + e.position[d] / e.covariance[d][d], b + 1.0 / e.covariance[d][d])
            });
            oracle_dev = oracle_dev.max((c[d] - num / den).abs());
        }
        let f = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<_> = est
            .iter()
            .map(|e| estimate(e.position[0], e.position[1], e.covariance[0][0] * f, e.covariance[1][1] * f))
            .collect();
        let cs = conflate(&scaled)?;
        scale_dev = scale_dev.max((c[0] - cs[0]).abs()).max((c[1] - cs[1]).abs());
    }
    outcome(
        examples && hull_bad == 0 && scale_dev < CONFLATION_TOL && oracle_dev < CONFLATION_TOL,
        format!(
            "examples {} ({single:?}, {equal:?}, {weighted:?}); 1000 random: {hull_bad} outside hull, scaling dev {scale_dev:.1e}, oracle dev {oracle_dev:.1e}",
            if examples { "exact" } else { "MISMATCH" }
        ),
    )
}

fn c6_training_smoke() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.num_subcarriers = 64;
    cfg.sim.los = true;
    cfg.num_train = 256;
    cfg.num_test = 16;
    cfg.validate()?;
    let (train_ds, _) = experiment::simulate(&cfg)?;
    let spec = cfg.model_spec(InputMode::Designed, FusionKind::None);
    let mut model = Model::init(spec, 0)?;
    let mut tc = TrainConfig {
        epochs: 10,
        seed: 0,
        schedule: LrSchedule::Constant,
        ..TrainConfig::default()
    };
    let mut progress = Progress::default();
    train(&mut model, &train_ds, &tc, &mut progress, None)?;
    let losses: Vec<f64> = progress.loss_curve().into_iter().map(|(_, _, l)| l).collect();
    let decreasing = losses.len() == 10 && losses.windows(2).all(|p| p[1] < p[0]);

    let mut mde = column(&model, &train_ds, 0)?.0.stats.mde;
    while mde >= SMOKE_MDE && tc.epochs < 500 {
        tc.epochs = (tc.epochs + 10).min(500);
        train(&mut model, &train_ds, &tc, &mut progress, None)?;
        mde = column(&model, &train_ds, 0)?.0.stats.mde;
    }
    outcome(
        decreasing && mde < SMOKE_MDE,
        format!(
            "first 10 losses {} ({:.4} -> {:.4}); train MDE {mde:.3} m after {} epochs",
            if decreasing { "strictly decreasing" } else { "NOT strictly decreasing" },
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
            tc.epochs
        ),
    )
}

fn c7_direction_of_effect() -> Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let cells = [
        (InputMode::Raw, FusionKind::None),
        (InputMode::Designed, FusionKind::None),
        (InputMode::Learned, FusionKind::None),
        (InputMode::Learned, FusionKind::Combined),
    ];
    let table = replicate_cells(&cfg, &cells)?;
    let med = |m: InputMode, f: FusionKind| -> Result<f64> {
        let v: Vec<f64> = table.cells.iter().filter(|c| c.mode == m && c.fusion == f).map(|c| c.mde).collect();
        median(&v).ok_or_else(|| Error::Contract(format!("no {m}/{f} cells")))
    };
    let raw = med(InputMode::Raw, FusionKind::None)?;
    let designed = med(InputMode::Designed, FusionKind::None)?;
    let learned = med(InputMode::Learned, FusionKind::None)?;
    let combined = med(InputMode::Learned, FusionKind::Combined)?;
    let (a, b, c) = (designed < raw, learned <= designed * SLACK, combined <= learned * SLACK);
    let per_seed: Vec<String> = table
        .seeds
        .iter()
        .map(|&s| {
            let v: Vec<String> = table.cells.iter().filter(|c| c.seed == s).map(|c| format!("{:.3}", c.mde)).collect();
            format!("seed {s}: {}", v.join("/"))
        })
        .collect();
    outcome(
        a && b && c,
        format!(
            "median MDE raw {raw:.3}, designed {designed:.3}, learned {learned:.3}, learned+combined {combined:.3}; (a) {} (b) {} (c) {} [{}]",
            a, b, c, per_seed.join("; ")
        ),
    )
}

fn c8_degenerate_fusion() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (m_r, w) = (2, 8);
    let records: Vec<_> = (0..100)
        .map(|i| CsiMeasurement {
            h: random_channel(m_r, w, &mut rng).cast(),
            position: [2.0, 2.0],
            timestamp: 0.0,
            ue_id: i,
        })
        .collect();
    let ds = Dataset { m_r, w, records };
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for mode in InputMode::ALL {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.num_antennas = m_r;
        cfg.sim.num_subcarriers = w;
        cfg.posnet.hidden = vec![32, 32];
        let base = Model::init(cfg.model_spec(mode, FusionKind::None), 5)?;
        let plain = base.predict_dataset(&ds, 0)?;
        for fusion in FusionKind::ALL {
            for map_fusion in [MapFusionKind::Conflation, MapFusionKind::Rnn] {
                let fc = FusionConfig {
                    delta: 0,
                    tau: 0,
                    map_fusion,
                    ..FusionConfig::default()
                };
                let fused = base.with_fusion(fusion, fc, 5)?.predict_dataset(&ds, 0)?;
                compared += fused.len();
                let same = fused.len() == plain.len()
                    && fused.iter().zip(&plain).all(|(a, b)| {
                        a.index == b.index
                            && a.estimate.position.map(f64::to_bits) == b.estimate.position.map(f64::to_bits)
                            && a.map.iter().map(|v| v.to_bits()).eq(b.map.iter().map(|v| v.to_bits()))
                    });
                if !same {
                    mismatches.push(format!("{mode}/{fusion}/{map_fusion:?}"));
                }
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{compared} fused predictions bit-identical to the plain pipeline")
        } else {
            format!("differ: {}", mismatches.join(", "))
        },
    )
}

fn c9_formats() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.num_antennas = 2;
    cfg.sim.num_subcarriers = 8;
    cfg.num_train = 300;
    cfg.num_test = 50;
    cfg.posnet.hidden = vec![16, 16];
    cfg.fusion_config.delta = 1;
    cfg.fusion_config.tau = 1;
    cfg.fusion_config.map_fusion = MapFusionKind::Rnn;
    cfg.train.epochs = 2;
    cfg.train.fusion_epochs = 1;
    let (train_ds, test_ds) = experiment::simulate(&cfg)?;
    let (model, progress) = experiment::train_new(&cfg, &train_ds, InputMode::Learned, FusionKind::Combined, None)?;

    let mut ok = true;
    let mut notes = Vec::new();
    for ds in [&train_ds, &test_ds] {
        let bytes = encode_dataset(ds)?;
        let back = decode_dataset(&bytes)?;
        ok &= &back == ds && encode_dataset(&back)? == bytes;
    }
    notes.push(format!("datasets {}", if ok { "byte-identical" } else { "DIFFER" }));

    let ck = experiment::checkpoint(&cfg, &model, &progress);
    let bytes = encode_checkpoint(&ck)?;
    let back = decode_checkpoint(&bytes)?;
    let ck_ok = encode_checkpoint(&back)? == bytes && back.store == model.store && back.progress.adam.step == progress.adam.step;
    ok &= ck_ok;
    notes.push(format!("checkpoint {}", if ck_ok { "byte-identical" } else { "DIFFERS" }));

    // Flip one bit at many offsets; every corruption must be rejected.
    let ds_bytes = encode_dataset(&test_ds)?;
    let mut undetected = 0;
    let mut trials = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for (blob, decode) in [
        (&ds_bytes, (|b: &[u8]| decode_dataset(b).map(|_| ())) as fn(&[u8]) -> Result<()>),
        (&bytes, |b: &[u8]| decode_checkpoint(b).map(|_| ())),
    ] {
        for _ in 0..200 {
            let mut bad = blob.clone();
            let at = rng.random_range(0..bad.len());
            bad[at] ^= 1 << rng.random_range(0..8);
            trials += 1;
            undetected += decode(&bad).is_ok() as usize;
        }
    }
    ok &= undetected == 0;
    notes.push(format!("{undetected} of {trials} bit flips undetected"));
    outcome(ok, notes.join(", "))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", Duration::from_secs(30), c1_oracle_equivalence),
        ("gradient suite", Duration::from_secs(300), c2_gradients),
        ("invariance suite", Duration::from_secs(300), c3_invariance),
        ("reference-map round trip", Duration::from_secs(60), c4_round_trip),
        ("conflation arithmetic", Duration::from_secs(60), c5_conflation),
        ("training smoke", Duration::from_secs(300), c6_training_smoke),
        ("direction of effect", Duration::from_secs(1800), c7_direction_of_effect),
        ("degenerate-fusion identity", Duration::from_secs(60), c8_degenerate_fusion),
        ("format round trip", Duration::from_secs(60), c9_formats),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let t = Instant::now();
        let result = run();
        let elapsed = t.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "{} {}. {name}: {detail} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

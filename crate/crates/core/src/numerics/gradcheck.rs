//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter (or "x") and flat index with the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Smallest |ReLU pre-activation| at the base point. Values below `10 * h`
    /// mean a kink may sit inside the difference stencil.
    pub relu_margin: Option<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, name: &str, idx: usize, sign: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss {v} at {name}[{idx}] {sign} h"
        )))
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
/// `coords` restricts the check to a subset of coordinates.
pub fn check_fn(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::dim("grad_check", format!("{} vs {}", analytic.len(), x.len())));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut point = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        relu_margin: None,
    };
    for &i in coords {
        let orig = point[i];
        let (hi, lo) = (orig + h, orig - h);
        point[i] = hi;
        let up = finite(f(&point)?, "x", i, "+")?;
        point[i] = lo;
        let down = finite(f(&point)?, "x", i, "-")?;
        point[i] = orig;
        // Divide by the step actually taken, not the nominal 2h.
        let numeric = (up - down) / (hi - lo);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(("x".into(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks the gradient of a graph-built loss with respect to every optimized
/// parameter in `store`. At most `max_per_param` coordinates of each
/// parameter are sampled.
pub fn check_params<R: Rng + ?Sized>(
    store: &mut ParamStore<f64>,
    mut build: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    h: f64,
    max_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let base = g.value(loss).data()[0];
    finite(base, "loss", 0, "+ 0")?;
    g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(store);
    let relu_margin = g.relu_margin();
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        relu_margin,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).is_optimized()).collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_param).into_vec()
        };
        let name = store.entry(id).name.clone();
        for i in coords {
            let orig = store.value(id).data()[i];
            let (hi, lo) = (orig + h, orig - h);
            store.value_mut(id).data_mut()[i] = hi;
            let up = finite(eval(store)?, &name, i, "+")?;
            store.value_mut(id).data_mut()[i] = lo;
            let down = finite(eval(store)?, &name, i, "-")?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (hi - lo);
            let err = relative_error(store.grad(id)[i], numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

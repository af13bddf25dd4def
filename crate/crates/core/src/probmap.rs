//! Grids of candidate positions, reference probability maps, position and
//! covariance extraction, and Gaussian conflation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor applied before inverse-variance weighting, in m^2.
pub const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    /// Area of interest `[0, width] x [0, height]`, meters.
    pub width: f64,
    pub height: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            rows: 8,
            cols: 8,
            width: 4.0,
            height: 4.0,
        }
    }
}

/// Uniform grid with points at the centers of `rows x cols` equal cells of
/// the area. Point `k = r * cols + c` has coordinates
/// `((c + 0.5) dx, (r + 0.5) dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    cfg: GridConfig,
    spacing: [f64; 2],
    points: Vec<[f64; 2]>,
}

impl Grid {
    pub fn new(cfg: GridConfig) -> Result<Self> {
        if cfg.rows < 2 || cfg.cols < 2 {
            return Err(Error::Config(format!("grid needs at least 2x2 points, got {}x{}", cfg.rows, cfg.cols)));
        }
        if !(cfg.width > 0.0 && cfg.height > 0.0 && cfg.width.is_finite() && cfg.height.is_finite()) {
            return Err(Error::Config(format!("grid area {}x{} must be positive", cfg.width, cfg.height)));
        }
        let spacing = [cfg.width / cfg.cols as f64, cfg.height / cfg.rows as f64];
        let mut points = Vec::with_capacity(cfg.rows * cfg.cols);
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                points.push([(c as f64 + 0.5) * spacing[0], (r as f64 + 0.5) * spacing[1]]);
            }
        }
        Ok(Grid { cfg, spacing, points })
    }

    pub fn config(&self) -> GridConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    /// Bounding box of the grid points, `([xmin, ymin], [xmax, ymax])`.
    pub fn hull(&self) -> ([f64; 2], [f64; 2]) {
        (self.points[0], self.points[self.points.len() - 1])
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        let (lo, hi) = self.hull();
        (0..2).all(|d| x[d] >= lo[d] && x[d] <= hi[d])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionEstimate {
    pub position: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

/// Cell index and fractional offset along one axis. Cells are half-open,
/// except that the far edge belongs to the last cell.
fn locate(u: f64, n: usize) -> (usize, f64) {
    let c = (u.floor() as usize).min(n - 2);
    (c, u - c as f64)
}

/// Bilinear reference map: the four corners of the enclosing cell carry the
/// weights whose expectation is `x`.
pub fn reference_map(x: [f64; 2], grid: &Grid) -> Result<Vec<f64>> {
    if !x.iter().all(|v| v.is_finite()) || !grid.contains(x) {
        let (lo, hi) = grid.hull();
        return Err(Error::Domain(format!("position {x:?} outside grid hull {lo:?}..{hi:?}")));
    }
    let (lo, _) = grid.hull();
    let cols = grid.cfg.cols;
    let (c, tx) = locate((x[0] - lo[0]) / grid.spacing[0], cols);
    let (r, ty) = locate((x[1] - lo[1]) / grid.spacing[1], grid.cfg.rows);
    let mut p = vec![0.0; grid.len()];
    p[r * cols + c] += (1.0 - tx) * (1.0 - ty);
    p[r * cols + c + 1] += tx * (1.0 - ty);
    p[(r + 1) * cols + c] += (1.0 - tx) * ty;
    p[(r + 1) * cols + c + 1] += tx * ty;
    Ok(p)
}

/// Expected position under `p` and the second central moment.
pub fn extract_position(p: &[f64], grid: &Grid) -> Result<PositionEstimate> {
    if p.len() != grid.len() {
        return Err(Error::dim("extract_position", format!("map of {} for grid of {}", p.len(), grid.len())));
    }
    let mut mean = [0.0; 2];
    for (g, &w) in grid.points.iter().zip(p) {
        mean[0] += w * g[0];
        mean[1] += w * g[1];
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (g, &w) in grid.points.iter().zip(p) {
        let (dx, dy) = (g[0] - mean[0], g[1] - mean[1]);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    Ok(PositionEstimate {
        position: mean,
        covariance: [[sxx, sxy], [sxy, syy]],
    })
}

/// Per-dimension inverse-variance weighted average of positions, with the
/// combined variance `1 / sum(1 / var)` on the diagonal. A single estimate is
/// returned unchanged.
pub fn conflate_estimates(estimates: &[PositionEstimate]) -> Result<PositionEstimate> {
    match estimates {
        [] => Err(Error::Contract("conflation of zero estimates".into())),
        [one] => Ok(*one),
        many => {
            let mut out = PositionEstimate {
                position: [0.0; 2],
                covariance: [[0.0; 2]; 2],
            };
            for d in 0..2 {
                let mut num = 0.0;
                let mut den = 0.0;
                for e in many {
                    let w = 1.0 / e.covariance[d][d].max(VARIANCE_FLOOR);
                    num += w * e.position[d];
                    den += w;
                }
                out.position[d] = num / den;
                out.covariance[d][d] = 1.0 / den;
            }
            Ok(out)
        }
    }
}

pub fn conflate(estimates: &[PositionEstimate]) -> Result<[f64; 2]> {
    Ok(conflate_estimates(estimates)?.position)
}

pub fn is_valid_map(p: &[f64], tol: f64) -> bool {
    p.iter().all(|&v| (0.0..=1.0).contains(&v)) && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Writes `k,gx,gy,p` rows.
pub fn write_map_csv(mut out: impl Write, grid: &Grid, p: &[f64]) -> Result<()> {
    if p.len() != grid.len() {
        return Err(Error::dim("write_map_csv", format!("map of {} for grid of {}", p.len(), grid.len())));
    }
    writeln!(out, "k,gx,gy,p")?;
    for (k, (g, v)) in grid.points.iter().zip(p).enumerate() {
        writeln!(out, "{k},{},{},{v}", g[0], g[1])?;
    }
    Ok(())
}

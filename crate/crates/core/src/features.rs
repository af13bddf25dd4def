//! Hand-designed CSI features: delay-domain transform, instantaneous 2D
//! autocorrelation over antenna and delay lags, real decomposition and
//! normalization.
//!
//! Lag layout: entry `(i, j)` of the `2M x 2W` autocorrelation holds antenna
//! lag `i + 1 - M` and delay lag `j + 1 - W`, so the zero lag sits at
//! `(M - 1, W - 1)` and the last row and column (lags `M` and `W`) are
//! always zero.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numerics::{complex_matmul, ComplexMatrix, Scalar};

/// Zero-lag position `(row, col)` in a `2M x 2W` autocorrelation.
pub fn zero_lag(m_r: usize, w: usize) -> (usize, usize) {
    (m_r - 1, w - 1)
}

/// Feature length `S = 2 * 2M * 2W`.
pub fn feature_len(m_r: usize, w: usize) -> usize {
    8 * m_r * w
}

/// `H * F_W^H` with the unitary DFT.
pub fn delay_transform<T: Scalar>(h: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    complex_matmul(h, &ComplexMatrix::idft(h.cols())).expect("square transform matches columns")
}

/// Linear 2D autocorrelation, evaluated by its defining double sum.
pub fn autocorrelation_direct<T: Scalar>(x: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    let (m_r, w) = (x.rows(), x.cols());
    let (mi, wi) = (m_r as isize, w as isize);
    let mut r = ComplexMatrix::zeros(2 * m_r, 2 * w);
    for i in 0..2 * m_r {
        let a = i as isize + 1 - mi;
        let rows = (0.max(-a))..(mi.min(mi - a));
        for j in 0..2 * w {
            let b = j as isize + 1 - wi;
            let mut acc = Complex::new(T::zero(), T::zero());
            for m in rows.clone() {
                for k in (0.max(-b))..(wi.min(wi - b)) {
                    let p = x.get(m as usize, k as usize);
                    let q = x.get((m + a) as usize, (k + b) as usize);
                    acc = acc + p * q.conj();
                }
            }
            r.set(i, j, acc);
        }
    }
    r
}

/// Column-major vectorization split into real then imaginary parts.
pub fn vec_real<T: Scalar>(r: &ComplexMatrix<T>) -> Vec<T> {
    let (rows, cols) = (r.rows(), r.cols());
    let n = rows * cols;
    let mut out = vec![T::zero(); 2 * n];
    for j in 0..cols {
        for i in 0..rows {
            let v = r.get(i, j);
            out[j * rows + i] = v.re;
            out[n + j * rows + i] = v.im;
        }
    }
    out
}

pub fn l2_normalize<T: Scalar>(mut v: Vec<T>) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("feature norm is {norm}")));
    }
    v.iter_mut().for_each(|x| *x = *x / norm);
    Ok(v)
}

/// Unit-norm real feature vector from an autocorrelation matrix.
pub fn make_feature<T: Scalar>(r: &ComplexMatrix<T>) -> Result<Vec<T>> {
    l2_normalize(vec_real(r))
}

/// Designed feature pipeline for one channel matrix.
pub fn designed_features<T: Scalar>(h: &ComplexMatrix<T>) -> Result<Vec<T>> {
    make_feature(&autocorrelation_direct(&delay_transform(h)))
}

/// Raw-CSI network input: row-major `[Re; Im]` of `H`, unit norm.
pub fn raw_features<T: Scalar>(h: &ComplexMatrix<T>) -> Result<Vec<T>> {
    let mut v = h.re().data().to_vec();
    v.extend_from_slice(h.im().data());
    l2_normalize(v)
}

use num_complex::Complex;

use crate::error::{Error, Result};

use super::scalar::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};

/// Complex matrix stored as separate real and imaginary row-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    re: Tensor<T>,
    im: Tensor<T>,
}

impl<T: Scalar> ComplexMatrix<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        let (rows, cols) = re.dims2()?;
        if im.shape() != re.shape() {
            return Err(Error::dim(
                "complex matrix",
                format!("re {:?} vs im {:?}", re.shape(), im.shape()),
            ));
        }
        Ok(ComplexMatrix { rows, cols, re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            re: Tensor::zeros(&[rows, cols]),
            im: Tensor::zeros(&[rows, cols]),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, f(i, j));
            }
        }
        out
    }

    pub fn identity(n: usize) -> Self {
        ComplexMatrix {
            rows: n,
            cols: n,
            re: Tensor::identity(n),
            im: Tensor::zeros(&[n, n]),
        }
    }

    /// Unitary DFT matrix, entries `exp(-2 pi i p q / n) / sqrt(n)`.
    pub fn dft(n: usize) -> Self {
        let scale = 1.0 / (n as f64).sqrt();
        Self::from_fn(n, n, |p, q| {
            // Reduce the exponent mod n first so large products stay exact.
            let phase = -2.0 * std::f64::consts::PI * ((p * q) % n) as f64 / n as f64;
            Complex::new(T::lit(scale * phase.cos()), T::lit(scale * phase.sin()))
        })
    }

    /// Unitary inverse DFT matrix, the Hermitian transpose of [`Self::dft`].
    pub fn idft(n: usize) -> Self {
        Self::dft(n).adjoint()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn re(&self) -> &Tensor<T> {
        &self.re
    }

    pub fn im(&self) -> &Tensor<T> {
        &self.im
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.re, self.im)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        let idx = i * self.cols + j;
        Complex::new(self.re.data()[idx], self.im.data()[idx])
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex<T>) {
        let idx = i * self.cols + j;
        self.re.data_mut()[idx] = v.re;
        self.im.data_mut()[idx] = v.im;
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * s)
    }

    pub fn cast<U: Scalar>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    pub fn frobenius_sq(&self) -> T {
        self.re.norm_sq() + self.im.norm_sq()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.re
            .data()
            .iter()
            .zip(other.re.data())
            .chain(self.im.data().iter().zip(other.im.data()))
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Complex product `a * b` through four real matrix products.
pub fn complex_matmul<T: Scalar>(a: &ComplexMatrix<T>, b: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "complex_matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut re = vec![T::zero(); m * n];
    let mut im = vec![T::zero(); m * n];
    let (ar, ai, br, bi) = (
        MatRef::dense(a.re.data(), m, k),
        MatRef::dense(a.im.data(), m, k),
        MatRef::dense(b.re.data(), k, n),
        MatRef::dense(b.im.data(), k, n),
    );
    gemm(T::one(), ar, br, T::zero(), MatMut::dense(&mut re, m, n));
    gemm(-T::one(), ai, bi, T::one(), MatMut::dense(&mut re, m, n));
    gemm(T::one(), ar, bi, T::zero(), MatMut::dense(&mut im, m, n));
    gemm(T::one(), ai, br, T::one(), MatMut::dense(&mut im, m, n));
    Ok(ComplexMatrix {
        rows: m,
        cols: n,
        re: Tensor::new(&[m, n], re)?,
        im: Tensor::new(&[m, n], im)?,
    })
}

/// Entrywise `|a|^2`.
pub fn abs_squared<T: Scalar>(a: &ComplexMatrix<T>) -> Tensor<T> {
    let data = a
        .re
        .data()
        .iter()
        .zip(a.im.data())
        .map(|(&r, &i)| r * r + i * i)
        .collect();
    Tensor::new(&[a.rows, a.cols], data).expect("same shape as input")
}

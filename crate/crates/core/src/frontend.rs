//! Trainable structured feature extractor.
//!
//! `H W1` replaces the inverse DFT, and the autocorrelation is computed in
//! the transform domain as `W2^H |W2 Hz W3|^2 W3^H` on the zero-padded
//! matrix `Hz`. With `W1 = F_W^H`, `W2 = F_2M` and `W3 = F_2W`, this is the
//! circular autocorrelation of `Hz` scaled by `1 / sqrt(4 M W)`; the
//! padding makes it equal to the linear one after the index map in
//! [`lag_permutation`].

use crate::error::{Error, Result};
use crate::features::feature_len;
use crate::numerics::{CVar, ComplexMatrix, Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct CParam {
    re: ParamId,
    im: ParamId,
}

/// Handles to the three complex weight matrices inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnedFrontend {
    pub m_r: usize,
    pub w: usize,
    w1: CParam,
    w2: CParam,
    w3: CParam,
}

fn add_complex<T: Scalar>(store: &mut ParamStore<T>, name: &str, m: ComplexMatrix<T>) -> Result<CParam> {
    let (re, im) = m.into_parts();
    Ok(CParam {
        re: store.add(format!("{name}.re"), re, ParamKind::Trainable)?,
        im: store.add(format!("{name}.im"), im, ParamKind::Trainable)?,
    })
}

fn find_complex<T: Scalar>(store: &ParamStore<T>, name: &str, n: usize) -> Result<CParam> {
    let get = |part: &str| {
        let full = format!("{name}.{part}");
        let id = store
            .id_of(&full)
            .ok_or_else(|| Error::Format(format!("missing parameter {full}")))?;
        if store.value(id).shape() != [n, n] {
            return Err(Error::dim("frontend", format!("{full} has shape {:?}, want [{n}, {n}]", store.value(id).shape())));
        }
        Ok(id)
    };
    Ok(CParam {
        re: get("re")?,
        im: get("im")?,
    })
}

impl LearnedFrontend {
    pub const PREFIX: &'static str = "frontend.";

    /// Adds DFT-initialized weights to `store`.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, m_r: usize, w: usize) -> Result<Self> {
        if m_r == 0 || w == 0 {
            return Err(Error::Config(format!("frontend needs M_R, W >= 1, got {m_r}, {w}")));
        }
        Ok(LearnedFrontend {
            m_r,
            w,
            w1: add_complex(store, "frontend.w1", ComplexMatrix::idft(w))?,
            w2: add_complex(store, "frontend.w2", ComplexMatrix::dft(2 * m_r))?,
            w3: add_complex(store, "frontend.w3", ComplexMatrix::dft(2 * w))?,
        })
    }

    /// Looks up previously stored weights.
    pub fn attach<T: Scalar>(store: &ParamStore<T>, m_r: usize, w: usize) -> Result<Self> {
        Ok(LearnedFrontend {
            m_r,
            w,
            w1: find_complex(store, "frontend.w1", w)?,
            w2: find_complex(store, "frontend.w2", 2 * m_r)?,
            w3: find_complex(store, "frontend.w3", 2 * w)?,
        })
    }

    pub fn feature_len(&self) -> usize {
        feature_len(self.m_r, self.w)
    }

    /// Current value of `W1`, `W2` or `W3` (`which` in 1..=3).
    pub fn weight<T: Scalar>(&self, store: &ParamStore<T>, which: usize) -> ComplexMatrix<T> {
        let p = match which {
            1 => self.w1,
            2 => self.w2,
            3 => self.w3,
            _ => panic!("frontend has weights 1..=3"),
        };
        ComplexMatrix::new(store.value(p.re).clone(), store.value(p.im).clone()).expect("stored square matrices")
    }

    fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: CParam) -> CVar {
        CVar {
            re: g.bind(store, p.re),
            im: g.bind(store, p.im),
        }
    }

    /// Features for a batch. `h` holds the stacked channel matrices as
    /// `[batch * M_R, W]` real and imaginary planes; the result is `[batch, S]`
    /// with unit-norm rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: CVar) -> Result<Var> {
        let (m, w) = (self.m_r, self.w);
        let (rows, cols) = g.value(h.re).dims2()?;
        if cols != w || rows % m != 0 {
            return Err(Error::dim("frontend", format!("input [{rows}, {cols}] for M_R={m}, W={w}")));
        }
        let b = rows / m;
        let w1 = Self::bind(g, store, self.w1);
        let w2 = Self::bind(g, store, self.w2);
        let w3 = Self::bind(g, store, self.w3);

        let hd = g.cmatmul(h, w1, false, false)?;
        let mut hz = [hd.re, hd.im];
        for v in hz.iter_mut() {
            let r = g.reshape(*v, &[b, m, w])?;
            let p = g.zero_pad(r, 2 * m, 2 * w)?;
            *v = g.reshape(p, &[b * 2 * m, 2 * w])?;
        }
        let y = g.cmatmul(CVar { re: hz[0], im: hz[1] }, w3, false, false)?;
        let y = reshape_c(g, y, &[b, 2 * m, 2 * w])?;
        let y = g.cmatmul_left_batched(w2, y, false)?;
        let power = g.abs_squared(y)?;
        let power = g.reshape(power, &[b * 2 * m, 2 * w])?;
        let z = g.rcmatmul(power, w3, true)?;
        let z = reshape_c(g, z, &[b, 2 * m, 2 * w])?;
        let r = g.cmatmul_left_batched(w2, z, true)?;

        // Column-major vectorization per sample, then [Re; Im].
        let mut parts = [r.re, r.im];
        for v in parts.iter_mut() {
            let t = g.transpose_inner(*v)?;
            *v = g.reshape(t, &[b, 4 * m * w])?;
        }
        let f = g.concat_last(parts[0], parts[1])?;
        g.l2_normalize(f)
    }

    /// Features of a single channel matrix.
    pub fn features<T: Scalar>(&self, store: &ParamStore<T>, h: &ComplexMatrix<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = CVar {
            re: g.constant(h.re().clone()),
            im: g.constant(h.im().clone()),
        };
        let f = self.forward(&mut g, store, x)?;
        Ok(g.value(f).data().to_vec())
    }
}

fn reshape_c<T: Scalar>(g: &mut Graph<T>, z: CVar, shape: &[usize]) -> Result<CVar> {
    Ok(CVar {
        re: g.reshape(z.re, shape)?,
        im: g.reshape(z.im, shape)?,
    })
}

/// Places `x` in the top-left corner of a zero `2M x 2W` matrix.
pub fn zero_pad<T: Scalar>(x: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    let mut out = ComplexMatrix::zeros(2 * x.rows(), 2 * x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, x.get(i, j));
        }
    }
    out
}

/// Index map between the two feature layouts: for every `i`,
/// `designed[i] == learned[perm[i]]` up to the global scale removed by
/// normalization. Lag `(a, b)` of the linear autocorrelation is stored by the
/// transform-domain path at circular index `(-a mod 2M, -b mod 2W)`.
pub fn lag_permutation(m_r: usize, w: usize) -> Vec<usize> {
    let (rows, cols) = (2 * m_r, 2 * w);
    let n = rows * cols;
    let mut perm = vec![0; 2 * n];
    for j in 0..cols {
        for i in 0..rows {
            let a = (rows + m_r - 1 - i) % rows;
            let b = (cols + w - 1 - j) % cols;
            perm[j * rows + i] = b * rows + a;
            perm[n + j * rows + i] = n + b * rows + a;
        }
    }
    perm
}

/// Stacks channel matrices into `[batch * M_R, W]` real and imaginary planes.
pub fn stack_channels<'a, T: Scalar>(hs: impl IntoIterator<Item = &'a ComplexMatrix<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut re = Vec::new();
    let mut im = Vec::new();
    let mut dims = None;
    for h in hs {
        let d = (h.rows(), h.cols());
        if *dims.get_or_insert(d) != d {
            return Err(Error::dim("stack_channels", format!("{d:?} vs {:?}", dims.unwrap())));
        }
        re.extend_from_slice(h.re().data());
        im.extend_from_slice(h.im().data());
    }
    let (m, w) = dims.ok_or_else(|| Error::Contract("empty channel batch".into()))?;
    let rows = re.len() / w;
    debug_assert_eq!(rows % m, 0);
    Ok((Tensor::new(&[rows, w], re)?, Tensor::new(&[rows, w], im)?))
}

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that (transitively) depends on a variable or a
//! bound parameter. Graphs are cheap and meant to be rebuilt for every batch.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Complex value carried as a pair of real nodes of identical shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: T },
    AddRow { a: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    NormalizeRows { a: Var, inv_norms: Vec<T>, skipped: Vec<bool> },
    AbsSquared { re: Var, im: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MulConst { a: Var, c: Vec<T> },
    Bce { p: Var, target: Vec<T> },
    Sum(Var),
    Reshape(Var),
    SwapLeading { a: Var, dims: [usize; 3] },
    TransposeInner { a: Var, dims: [usize; 3] },
    ZeroPad { a: Var, dims: [usize; 3], padded: [usize; 2] },
    ConcatLast { a: Var, b: Var, da: usize, db: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating the
/// running estimates after the step.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(ParamId, Var)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("non-empty shape");
    let n = shape.iter().product::<usize>() / d;
    (n, d)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node so gradients from every use accumulate.
    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.is_optimized());
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Smallest |pre-activation| over every ReLU on the tape; finite
    /// difference checks resample inputs when this is near the step size.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|x| x.abs()))
            .reduce(T::min)
    }

    // ---- linear algebra -------------------------------------------------

    /// `alpha * op(a) * op(b)` for rank-2 operands, `op` optionally transposing.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?}{} x {:?}{}", self.shape(a), if ta { "^T" } else { "" }, self.shape(b), if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::dense(self.value(a).data(), ra, ca);
            let bv = MatRef::dense(self.value(b).data(), rb, cb);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            gemm(alpha, av, bv, T::zero(), MatMut::dense(&mut out, m, n));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb, alpha }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false, T::one())
    }

    /// `x * w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Affine { a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    /// Adds `bias` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(a));
        if self.value(bias).numel() != d {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let mut v = self.value(a).clone();
        let bv = self.value(bias).data();
        for r in 0..n {
            for (x, &b) in v.data_mut()[r * d..(r + 1) * d].iter_mut().zip(bv) {
                *x = *x + b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddRow { a, bias }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so that corrupted inputs still surface in the loss.
        let v = self.value(a).map(|x| if x > T::zero() || x.is_nan() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d).take(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows(a, false)
    }

    /// Like [`Self::l2_normalize`], but rows whose norm already equals one to
    /// within `sqrt(eps)` pass through unchanged, bit for bit.
    pub fn renormalize(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows(a, true)
    }

    fn normalize_rows(&mut self, a: Var, skip_unit: bool) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(a));
        let mut v = self.value(a).clone();
        let mut inv_norms = Vec::with_capacity(n);
        let mut skipped = Vec::with_capacity(n);
        let tol = T::epsilon().sqrt();
        for (r, row) in v.data_mut().chunks_mut(d).enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "cannot normalize row {r}: norm is {norm}"
                )));
            }
            let skip = skip_unit && (norm - T::one()).abs() <= tol;
            let inv = T::one() / norm;
            if !skip {
                row.iter_mut().for_each(|x| *x = *x * inv);
            }
            inv_norms.push(inv);
            skipped.push(skip);
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::NormalizeRows { a, inv_norms, skipped }, rg))
    }

    /// Entrywise `re^2 + im^2`.
    pub fn abs_squared(&mut self, z: CVar) -> Result<Var> {
        self.same_shape("abs_squared", z.re, z.im)?;
        let v = self.zip_map(z.re, z.im, |r, i| r * r + i * i);
        let rg = self.rg(z.re) || self.rg(z.im);
        Ok(self.push(v, Op::AbsSquared { re: z.re, im: z.im }, rg))
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::dim("mul_const", format!("{:?} vs {}", self.shape(a), c.len())));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst { a, c }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so eval mode
    /// is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).numel(), rate, rng);
        self.mul_const(a, mask)
    }

    /// Batch normalization over the rows of `x: [n, d]`.
    ///
    /// In train mode the batch mean and biased variance normalize the input
    /// and are returned for updating running estimates. In eval mode the
    /// provided running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("batch_norm", format!("features {d}, gamma {:?}", self.shape(gamma))));
        }
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::dim("batch_norm", "running statistics length".to_string()));
        }
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "train-mode batch norm needs at least 2 rows, got {n}"
                    )));
                }
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] = var[j] + c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nf);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for j in 0..d {
                let h = (xs[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&[n, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Mean binary cross-entropy between predicted probabilities `p` (clamped
    /// to `[BCE_EPS, 1 - BCE_EPS]`) and targets of the same shape.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(p).numel() {
            return Err(Error::dim("bce", format!("{:?} vs {}", self.shape(p), target.len())));
        }
        let loss = bce_value(self.value(p).data(), target);
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    fn dims3(&self, a: Var) -> Result<[usize; 3]> {
        match *self.shape(a) {
            [d0, d1, d2] => Ok([d0, d1, d2]),
            ref s => Err(Error::dim("layout", format!("expected rank 3, got {s:?}"))),
        }
    }

    /// `[d0, d1, d2] -> [d1, d0, d2]`.
    pub fn swap_leading(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims3(a)?;
        let [d0, d1, d2] = dims;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                out[(j * d0 + i) * d2..(j * d0 + i + 1) * d2].copy_from_slice(&src[(i * d1 + j) * d2..(i * d1 + j + 1) * d2]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[d1, d0, d2], out)?, Op::SwapLeading { a, dims }, rg))
    }

    /// `[b, r, c] -> [b, c, r]`.
    pub fn transpose_inner(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims3(a)?;
        let [b, r, c] = dims;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..b {
            let base = s * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[b, c, r], out)?, Op::TransposeInner { a, dims }, rg))
    }

    /// Embeds each `[r, c]` slice of `a: [b, r, c]` in the top-left corner of a
    /// zero `[rows, cols]` slice.
    pub fn zero_pad(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let dims = self.dims3(a)?;
        let [b, r, c] = dims;
        if rows < r || cols < c {
            return Err(Error::dim("zero_pad", format!("{dims:?} into {rows}x{cols}")));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * rows * cols];
        for s in 0..b {
            for i in 0..r {
                let dst = s * rows * cols + i * cols;
                let from = s * r * c + i * c;
                out[dst..dst + c].copy_from_slice(&src[from..from + c]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[b, rows, cols], out)?,
            Op::ZeroPad {
                a,
                dims,
                padded: [rows, cols],
            },
            rg,
        ))
    }

    /// Concatenates `[n, da]` and `[n, db]` along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.value(a).dims2()?;
        let (nb, db) = self.value(b).dims2()?;
        if n != nb {
            return Err(Error::dim("concat", format!("{:?} ++ {:?}", self.shape(a), self.shape(b))));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&x[r * da..(r + 1) * da]);
            out.extend_from_slice(&y[r * db..(r + 1) * db]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, da + db], out)?, Op::ConcatLast { a, b, da, db }, rg))
    }

    // ---- complex helpers --------------------------------------------------

    /// `op(a) * op(b)` for complex rank-2 operands, `op` optionally taking the
    /// conjugate transpose.
    pub fn cmatmul(&mut self, a: CVar, b: CVar, adj_a: bool, adj_b: bool) -> Result<CVar> {
        let one = T::one();
        let sa = if adj_a { -one } else { one };
        let sb = if adj_b { -one } else { one };
        let rr = self.matmul_ext(a.re, b.re, adj_a, adj_b, one)?;
        let ii = self.matmul_ext(a.im, b.im, adj_a, adj_b, -(sa * sb))?;
        let ri = self.matmul_ext(a.re, b.im, adj_a, adj_b, sb)?;
        let ir = self.matmul_ext(a.im, b.re, adj_a, adj_b, sa)?;
        Ok(CVar {
            re: self.add(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    /// Real matrix times complex `op(b)`.
    pub fn rcmatmul(&mut self, a: Var, b: CVar, adj_b: bool) -> Result<CVar> {
        let sb = if adj_b { -T::one() } else { T::one() };
        Ok(CVar {
            re: self.matmul_ext(a, b.re, false, adj_b, T::one())?,
            im: self.matmul_ext(a, b.im, false, adj_b, sb)?,
        })
    }

    /// Applies `op(w)` from the left to every slice of `x: [batch, r, c]`.
    pub fn cmatmul_left_batched(&mut self, w: CVar, x: CVar, adj_w: bool) -> Result<CVar> {
        let [b, r, c] = self.dims3(x.re)?;
        let mut flat = [x.re, x.im];
        for v in flat.iter_mut() {
            let s = self.swap_leading(*v)?;
            *v = self.reshape(s, &[r, b * c])?;
        }
        let y = self.cmatmul(w, CVar { re: flat[0], im: flat[1] }, adj_w, false)?;
        let rows = self.shape(y.re)[0];
        let mut out = [y.re, y.im];
        for v in out.iter_mut() {
            let s = self.reshape(*v, &[rows, b, c])?;
            *v = self.swap_leading(s)?;
        }
        Ok(CVar { re: out[0], im: out[1] })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`. Gradients from earlier
    /// passes on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter into `store`. Parameters
    /// the loss did not reach receive nothing (their gradient stays zero).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.bound {
            if let Some(g) = self.grads[v.0].as_ref() {
                for (acc, &x) in store.entry_mut(id).grad.iter_mut().zip(g) {
                    *acc = *acc + x;
                }
            }
        }
    }
}

pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn bce_value<T: Scalar>(p: &[T], target: &[T]) -> T {
    let eps = T::lit(BCE_EPS);
    let n = T::from_usize(p.len()).unwrap();
    let total: T = p
        .iter()
        .zip(target)
        .map(|(&q, &t)| {
            let q = if q.is_nan() { q } else { q.max(eps).min(T::one() - eps) };
            t * q.ln() + (T::one() - t) * (T::one() - q).ln()
        })
        .sum();
    -total / n
}

fn acc<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb, alpha } => {
            let (ra, ca) = nodes[a.0].value.dims2().unwrap();
            let (rb, cb) = nodes[b.0].value.dims2().unwrap();
            let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
            let n = if tb { rb } else { cb };
            let gv = MatRef::dense(g, m, n);
            if let Some(da) = acc(nodes, grads, a) {
                let bv = MatRef::dense(nodes[b.0].value.data(), rb, cb);
                let opb = if tb { bv.t() } else { bv };
                let dst = MatMut::dense(da, ra, ca);
                let dst = if ta { dst.t() } else { dst };
                gemm(alpha, gv, opb.t(), T::one(), dst);
            }
            if let Some(db) = acc(nodes, grads, b) {
                let av = MatRef::dense(nodes[a.0].value.data(), ra, ca);
                let opa = if ta { av.t() } else { av };
                let dst = MatMut::dense(db, rb, cb);
                let dst = if tb { dst.t() } else { dst };
                debug_assert_eq!(opa.rows, m);
                debug_assert_eq!(k, dst.rows);
                gemm(alpha, opa.t(), gv, T::one(), dst);
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = acc(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(d) = acc(nodes, grads, a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = acc(nodes, grads, b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        &Op::Mul(a, b) => {
            if let Some(d) = acc(nodes, grads, a) {
                let bv = nodes[b.0].value.data();
                d.iter_mut().zip(g).zip(bv).for_each(|((d, &g), &y)| *d = *d + g * y);
            }
            if let Some(d) = acc(nodes, grads, b) {
                let av = nodes[a.0].value.data();
                d.iter_mut().zip(g).zip(av).for_each(|((d, &g), &x)| *d = *d + g * x);
            }
        }
        &Op::Affine { a, scale } => {
            if let Some(d) = acc(nodes, grads, a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + scale * g);
            }
        }
        &Op::AddRow { a, bias } => {
            if let Some(d) = acc(nodes, grads, a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = acc(nodes, grads, bias) {
                let w = d.len();
                for row in g.chunks(w) {
                    d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        &Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            if let Some(d) = acc(nodes, grads, a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    if x > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some(d) = acc(nodes, grads, a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + g * y * (T::one() - y);
                }
            }
        }
        &Op::Tanh(a) => {
            if let Some(d) = acc(nodes, grads, a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + g * (T::one() - y * y);
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            if let Some(d) = acc(nodes, grads, a) {
                let (_, w) = rows_cols(node.value.shape());
                for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + y * (g - dot);
                    }
                }
            }
        }
        Op::NormalizeRows { a, inv_norms, skipped } => {
            if let Some(d) = acc(nodes, grads, *a) {
                let (_, w) = rows_cols(node.value.shape());
                for (r, ((dr, gr), yr)) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)).enumerate() {
                    if skipped[r] {
                        dr.iter_mut().zip(gr).for_each(|(d, &g)| *d = *d + g);
                        continue;
                    }
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    let inv = inv_norms[r];
                    for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + (g - y * dot) * inv;
                    }
                }
            }
        }
        &Op::AbsSquared { re, im } => {
            let two = T::lit(2.0);
            for v in [re, im] {
                let x = nodes[v.0].value.data();
                if let Some(d) = acc(nodes, grads, v) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d = *d + two * x * g;
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, w) = nodes[x.0].value.dims2().unwrap();
            let gam = nodes[gamma.0].value.data();
            if let Some(d) = acc(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        d[j] = d[j] + gr[j] * hr[j];
                    }
                }
            }
            if let Some(d) = acc(nodes, grads, *beta) {
                for gr in g.chunks(w) {
                    d.iter_mut().zip(gr).for_each(|(d, &g)| *d = *d + g);
                }
            }
            if let Some(d) = acc(nodes, grads, *x) {
                if *batch_stats {
                    let nf = T::from_usize(n).unwrap();
                    let mut sum_dh = vec![T::zero(); w];
                    let mut sum_dh_h = vec![T::zero(); w];
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            let dh = gr[j] * gam[j];
                            sum_dh[j] = sum_dh[j] + dh;
                            sum_dh_h[j] = sum_dh_h[j] + dh * hr[j];
                        }
                    }
                    for ((dr, gr), hr) in d.chunks_mut(w).zip(g.chunks(w)).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            let dh = gr[j] * gam[j];
                            dr[j] = dr[j] + inv_std[j] / nf * (nf * dh - sum_dh[j] - hr[j] * sum_dh_h[j]);
                        }
                    }
                } else {
                    for (dr, gr) in d.chunks_mut(w).zip(g.chunks(w)) {
                        for j in 0..w {
                            dr[j] = dr[j] + gr[j] * gam[j] * inv_std[j];
                        }
                    }
                }
            }
        }
        Op::MulConst { a, c } => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).zip(c).for_each(|((d, &g), &c)| *d = *d + g * c);
            }
        }
        Op::Bce { p, target } => {
            let q = nodes[p.0].value.data();
            if let Some(d) = acc(nodes, grads, *p) {
                let eps = T::lit(BCE_EPS);
                let scale = g[0] / T::from_usize(q.len()).unwrap();
                for ((d, &q), &t) in d.iter_mut().zip(q).zip(target) {
                    if q < eps || q > T::one() - eps {
                        continue;
                    }
                    *d = *d - scale * (t / q - (T::one() - t) / (T::one() - q));
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(d) = acc(nodes, grads, a) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        &Op::Reshape(a) => {
            if let Some(d) = acc(nodes, grads, a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        &Op::SwapLeading { a, dims: [d0, d1, d2] } => {
            if let Some(d) = acc(nodes, grads, a) {
                for i in 0..d0 {
                    for j in 0..d1 {
                        let src = &g[(j * d0 + i) * d2..(j * d0 + i + 1) * d2];
                        let dst = &mut d[(i * d1 + j) * d2..(i * d1 + j + 1) * d2];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }
        &Op::TransposeInner { a, dims: [b, r, c] } => {
            if let Some(d) = acc(nodes, grads, a) {
                for s in 0..b {
                    let base = s * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            d[base + i * c + j] = d[base + i * c + j] + g[base + j * r + i];
                        }
                    }
                }
            }
        }
        &Op::ZeroPad {
            a,
            dims: [b, r, c],
            padded: [rows, cols],
        } => {
            if let Some(d) = acc(nodes, grads, a) {
                for s in 0..b {
                    for i in 0..r {
                        let src = &g[s * rows * cols + i * cols..][..c];
                        let dst = &mut d[s * r * c + i * c..][..c];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }
        &Op::ConcatLast { a, b, da, db } => {
            let w = da + db;
            if let Some(d) = acc(nodes, grads, a) {
                for (dr, gr) in d.chunks_mut(da).zip(g.chunks(w)) {
                    dr.iter_mut().zip(&gr[..da]).for_each(|(d, &g)| *d = *d + g);
                }
            }
            if let Some(d) = acc(nodes, grads, b) {
                for (dr, gr) in d.chunks_mut(db).zip(g.chunks(w)) {
                    dr.iter_mut().zip(&gr[da..]).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_of_wx_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (4, 3);
        let w = randn(&[m, n], &mut rng);
        let x = randn(&[n, 1], &mut rng);
        let mut g = Graph::new();
        let wv = g.variable(w.clone());
        let xv = g.constant(x.clone());
        let y = g.matmul(wv, xv).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        // d/dW ||Wx||^2 = 2 W x x^T
        let wx: Vec<f64> = (0..m).map(|i| (0..n).map(|j| w.data()[i * n + j] * x.data()[j]).sum()).collect();
        for i in 0..m {
            for j in 0..n {
                let expect = 2.0 * wx[i] * x.data()[j];
                assert!((g.grad(wv).unwrap()[i * n + j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0, 2.0]), ParamKind::Trainable).unwrap();
        let b = store.add("b", Tensor::from_vec(vec![1.0]), ParamKind::Trainable).unwrap();
        let mut g = Graph::new();
        let av = g.bind(&store, a);
        let _ = g.bind(&store, b);
        let s = g.sum(av);
        g.backward(s).unwrap();
        store.zero_grads();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(a), &[1.0, 1.0]);
        assert_eq!(store.grad(b), &[0.0]);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_vec(vec![3.0]), ParamKind::Trainable).unwrap();
        let mut g = Graph::new();
        let x = g.bind(&store, a);
        let y = g.bind(&store, a);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(a), &[6.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let v = g.constant(Tensor::from_vec(vec![-2.0, 0.5]));
        let r = g.relu(v);
        assert_eq!(g.value(r).data(), &[0.0, 0.5]);
        let v = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let n = g.l2_normalize(v).unwrap();
        let got = g.value(n).data();
        assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] - 0.8).abs() < 1e-15);
        let zero = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.l2_normalize(zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn abs_squared_of_zero_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let re = g.variable(Tensor::zeros(&[1, 1]));
        let im = g.variable(Tensor::zeros(&[1, 1]));
        let a = g.abs_squared(CVar { re, im }).unwrap();
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert_eq!(g.value(a).data(), &[0.0]);
        assert_eq!(g.grad(re).unwrap(), &[0.0]);
        assert_eq!(g.grad(im).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[50, 7], &mut rng).map(|v| 30.0 * v));
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(7) {
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn renormalize_passes_unit_rows_through_bit_exactly() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![0.6f32, 0.8]));
        let y = g.renormalize(x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let x = g.constant(Tensor::from_vec(vec![3.0f32, 4.0]));
        let y = g.renormalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    fn bn(g: &mut Graph<f64>, x: Var, d: usize, mode: Mode) -> (Var, Option<BatchStats<f64>>) {
        let gamma = g.constant(Tensor::full(&[d], 1.0));
        let beta = g.constant(Tensor::zeros(&[d]));
        g.batch_norm(x, gamma, beta, &vec![0.0; d], &vec![1.0; d], 1e-5, mode).unwrap()
    }

    #[test]
    fn batch_norm_constant_column_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap());
        let (y, _) = bn(&mut g, x, 2, Mode::Train);
        let out = g.value(y).data();
        assert_eq!([out[0], out[2], out[4]], [0.0; 3]);
    }

    #[test]
    fn batch_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[64, 5], &mut rng).map(|v| 3.0 * v + 2.0));
        let (y, _) = bn(&mut g, x, 5, Mode::Train);
        let out = g.value(y).data();
        for j in 0..5 {
            let col: Vec<f64> = out.chunks(5).map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn batch_norm_momentum_one_makes_eval_match_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = randn(&[16, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(data);
        let gamma = g.constant(Tensor::from_vec(vec![1.5, -0.5, 2.0]));
        let beta = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let (y_train, stats) = g.batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train).unwrap();
        let stats = stats.unwrap();
        // momentum 1.0: running statistics become the batch statistics
        let (y_eval, _) = g.batch_norm(x, gamma, beta, &stats.mean, &stats.var, 1e-5, Mode::Eval).unwrap();
        for (a, b) in g.value(y_train).data().iter().zip(g.value(y_eval).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train_mode() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        assert!(g.batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train).is_err());
        assert!(g.batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], 1e-5, Mode::Eval).is_ok());
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1_000_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!((kept as f64 / 1e6 - 0.5).abs() < 0.002);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let a: Vec<f32> = dropout_mask(1000, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let b: Vec<f32> = dropout_mask(1000, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn bce_matches_arithmetic() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[1, 4], vec![0.25; 4]).unwrap());
        let l = g.bce(p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = (-(0.25f64).ln() - 3.0 * (0.75f64).ln()) / 4.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.5623).abs() < 1e-4);
        let p = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let l = g.bce(p, &[1.0, 0.0, 0.0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-5);
    }

    /// Every op, composed into small scalar losses, against central differences.
    #[test]
    fn every_op_passes_gradient_check() {
        type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            }),
            ("matmul_transposed", vec![vec![4, 3], vec![2, 4]], |g, v| {
                let y = g.matmul_ext(v[0], v[1], true, true, 0.7)?;
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            }),
            ("add_sub_affine", vec![vec![2, 3], vec![2, 3]], |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(a, v[1])?;
                let c = g.affine(b, -1.5, 0.3);
                let d = g.mul(c, a)?;
                Ok(g.sum(d))
            }),
            ("linear_relu", vec![vec![5, 3], vec![3, 4], vec![4]], |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let r = g.relu(y);
                let s = g.mul(r, r)?;
                Ok(g.sum(s))
            }),
            ("sigmoid_tanh", vec![vec![3, 3]], |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.tanh(v[0]);
                let c = g.mul(a, b)?;
                Ok(g.sum(c))
            }),
            ("softmax_bce", vec![vec![3, 5]], |g, v| {
                let p = g.softmax(v[0]);
                let t: Vec<f64> = (0..15).map(|i| if i % 5 == 1 { 1.0 } else { 0.0 }).collect();
                g.bce(p, &t)
            }),
            ("normalize", vec![vec![2, 6], vec![2, 6]], |g, v| {
                let n = g.l2_normalize(v[0])?;
                let d = g.mul(n, v[1])?;
                Ok(g.sum(d))
            }),
            ("abs_squared", vec![vec![3, 2], vec![3, 2]], |g, v| {
                let a = g.abs_squared(CVar { re: v[0], im: v[1] })?;
                let s = g.mul(a, a)?;
                Ok(g.sum(s))
            }),
            ("batch_norm", vec![vec![6, 3], vec![3], vec![3], vec![6, 3]], |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train)?;
                let d = g.mul(y, v[3])?;
                Ok(g.sum(d))
            }),
            ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3], vec![4, 3]], |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.1, 0.2, -0.1], &[0.5, 2.0, 1.0], 1e-5, Mode::Eval)?;
                let d = g.mul(y, v[3])?;
                Ok(g.sum(d))
            }),
            ("mul_const", vec![vec![2, 2]], |g, v| {
                let y = g.mul_const(v[0], vec![0.0, 2.0, 2.0, 0.0])?;
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            }),
            ("layout", vec![vec![2, 3, 4], vec![3, 5, 6]], |g, v| {
                let a = g.swap_leading(v[0])?;
                let b = g.transpose_inner(a)?;
                let c = g.zero_pad(b, 5, 6)?;
                let cc = g.reshape(c, &[3, 5, 6])?;
                let d = g.mul(cc, v[1])?;
                let e = g.mul(d, cc)?;
                Ok(g.sum(e))
            }),
            ("concat", vec![vec![2, 3], vec![2, 2], vec![2, 5]], |g, v| {
                let c = g.concat_last(v[0], v[1])?;
                let d = g.mul(c, v[2])?;
                let e = g.mul(d, c)?;
                Ok(g.sum(e))
            }),
            ("complex_matmul_adjoints", vec![vec![3, 2], vec![3, 2], vec![3, 4], vec![3, 4]], |g, v| {
                let a = CVar { re: v[0], im: v[1] };
                let b = CVar { re: v[2], im: v[3] };
                let c = g.cmatmul(a, b, true, false)?;
                let d = g.cmatmul(c, c, false, true)?;
                let e = g.abs_squared(d)?;
                Ok(g.sum(e))
            }),
            ("left_batched", vec![vec![3, 2], vec![3, 2], vec![2, 2, 4], vec![2, 2, 4]], |g, v| {
                let w = CVar { re: v[0], im: v[1] };
                let x = CVar { re: v[2], im: v[3] };
                let y = g.cmatmul_left_batched(w, x, false)?;
                let e = g.abs_squared(y)?;
                Ok(g.sum(e))
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (name, shapes, build) in cases {
            let mut store = ParamStore::<f64>::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("p{i}"), randn(s, &mut rng), ParamKind::Trainable).unwrap())
                .collect();
            let report = check_params(
                &mut store,
                |g, s| {
                    let vars: Vec<Var> = ids.iter().map(|&id| g.bind(s, id)).collect();
                    build(g, &vars)
                },
                1e-6,
                64,
                &mut rng,
            )
            .unwrap();
            if let Some(m) = report.relu_margin {
                assert!(m > 1e-5, "{name}: resample, relu kink within stencil");
            }
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }
}

//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly: each node holds its forward
//! value, and [`Graph::backward`] walks the tape in reverse to produce exact
//! gradients for every node that depends on a leaf created with
//! [`Graph::param`]. Leaves created with [`Graph::constant`] never receive
//! gradients and prune the backward pass.
//!
//! Rows are batch items by convention; per-row reductions (`row_sum`,
//! `row_max_abs`) keep batch items independent so that the gradient of
//! `sum(per_row_loss)` with respect to an input batch is the per-item
//! gradient.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{sum_acc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// `x * w^T + b`, with `w` stored `(out x in)`.
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// Per-column affine map with constant coefficients.
    AffineCols { x: Var, scale: Vec<T> },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMaxAbs { x: Var, argmax: Vec<usize> },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<T> {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

fn same_shape<T: Scalar>(a: &Mat<T>, b: &Mat<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {op}");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.cols, "linear: input width vs weight columns");
        let mut out = xv.matmul(wv, true);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.rows), "linear: bias shape");
            out.add_row_broadcast(&bv.data);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        same_shape(self.value(a), self.value(b), name);
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "min", |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `y[:, j] = x[:, j] * scale[j] + shift[j]`.
    pub fn affine_cols(&mut self, x: Var, scale: &[T], shift: &[T]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols, scale.len(), "affine_cols scale width");
        assert_eq!(xv.cols, shift.len(), "affine_cols shift width");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for ((o, &s), &b) in out.row_mut(r).iter_mut().zip(scale).zip(shift) {
                *o = *o * s + b;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AffineCols { x, scale: scale.to_vec() }, ng)
    }

    pub fn scale_cols(&mut self, x: Var, scale: &[T]) -> Var {
        let zeros = vec![T::zero(); scale.len()];
        self.affine_cols(x, scale, &zeros)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::fast_tanh, Op::Tanh(x))
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Square root; the subgradient at zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, T::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(Mat::scalar(m), Op::Mean(x), ng)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows).map(|r| sum_acc(v.row(r).iter().copied())).collect();
        let out = Mat::from_vec(v.rows, 1, data);
        let ng = self.ng(x);
        self.push(out, Op::RowSum(x), ng)
    }

    /// Per-row ℓ∞ norm; the gradient flows to the first maximizing entry.
    pub fn row_max_abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut argmax = Vec::with_capacity(v.rows);
        let mut data = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let (mut best, mut arg) = (T::neg_infinity(), 0);
            for (c, &e) in v.row(r).iter().enumerate() {
                if e.abs() > best {
                    best = e.abs();
                    arg = c;
                }
            }
            argmax.push(arg);
            data.push(if v.cols == 0 { T::zero() } else { best });
        }
        let out = Mat::from_vec(v.rows, 1, data);
        let ng = self.ng(x);
        self.push(out, Op::RowMaxAbs { x, argmax }, ng)
    }

    /// Per-row Euclidean norm.
    pub fn row_norm2(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let s = self.row_sum(sq);
        self.sqrt(s)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols rows");
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Mat::from_vec(av.rows, cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(v.rows * len);
        for r in 0..v.rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Mat::from_vec(v.rows, len, data);
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, op: &Op<T>, y: &Mat<T>, gy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let mut acc = |v: Var, g: Mat<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    acc(*x, gy.matmul(wv, false));
                }
                if self.ng(*w) {
                    let mut gw = Mat::zeros(wv.rows, wv.cols);
                    T::gemm(wv.rows, xv.rows, wv.cols, T::one(), &gy.data, true, &xv.data, false, T::zero(), &mut gw.data);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = Mat::zeros(1, gy.cols);
                        for r in 0..gy.rows {
                            for (o, &g) in gb.data.iter_mut().zip(gy.row(r)) {
                                *o += g;
                            }
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, gy.matmul(bv, true));
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    T::gemm(av.cols, av.rows, gy.cols, T::one(), &av.data, true, &gy.data, false, T::zero(), &mut gb.data);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, gy.zip_map(bv, |g, y| g * y));
                acc(*b, gy.zip_map(av, |g, x| g * x));
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mask_a = av.zip_map(bv, |x, y| if y < x { T::zero() } else { T::one() });
                acc(*a, gy.zip_map(&mask_a, |g, m| g * m));
                acc(*b, gy.zip_map(&mask_a, |g, m| g * (T::one() - m)));
            }
            Op::Scale(x, c) => acc(*x, gy.map(|g| g * *c)),
            Op::AddScalar(x) => acc(*x, gy.clone()),
            Op::AffineCols { x, scale } => {
                let mut g = gy.clone();
                for r in 0..g.rows {
                    for (o, &s) in g.row_mut(r).iter_mut().zip(scale) {
                        *o *= s;
                    }
                }
                acc(*x, g);
            }
            Op::Tanh(x) => acc(*x, gy.zip_map(y, |g, t| g * (T::one() - t * t))),
            Op::Relu(x) => acc(*x, gy.zip_map(y, |g, r| if r > T::zero() { g } else { T::zero() })),
            Op::Sigmoid(x) => acc(*x, gy.zip_map(y, |g, s| g * s * (T::one() - s))),
            Op::Exp(x) => acc(*x, gy.zip_map(y, |g, e| g * e)),
            Op::Square(x) => acc(*x, gy.zip_map(self.value(*x), |g, v| g * T::lit(2.0) * v)),
            Op::Sqrt(x) => acc(
                *x,
                gy.zip_map(y, |g, s| if s > T::zero() { g / (T::lit(2.0) * s) } else { T::zero() }),
            ),
            Op::Abs(x) => acc(
                *x,
                gy.zip_map(self.value(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                gy.zip_map(self.value(*x), |g, v| if v >= *lo && v <= *hi { g } else { T::zero() }),
            ),
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Mat::filled(r, c, gy.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Mat::filled(r, c, gy.item() / T::lit((r * c) as f64)));
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                let mut g = Mat::zeros(r, c);
                for i in 0..r {
                    let gi = gy.data[i];
                    g.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                acc(*x, g);
            }
            Op::RowMaxAbs { x, argmax } => {
                let xv = self.value(*x);
                let mut g = Mat::zeros(xv.rows, xv.cols);
                for (i, &j) in argmax.iter().enumerate() {
                    if xv.cols == 0 {
                        continue;
                    }
                    let v = xv.at(i, j);
                    let s = if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *g.at_mut(i, j) = gy.data[i] * s;
                }
                acc(*x, g);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                let bc = self.value(*b).cols;
                let mut ga = Mat::zeros(gy.rows, ac);
                let mut gb = Mat::zeros(gy.rows, bc);
                for r in 0..gy.rows {
                    ga.row_mut(r).copy_from_slice(&gy.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&gy.row(r)[ac..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut g = Mat::zeros(r, c);
                for i in 0..r {
                    g.row_mut(i)[*start..*start + gy.cols].copy_from_slice(gy.row(i));
                }
                acc(*x, g);
            }
        }
    }
}

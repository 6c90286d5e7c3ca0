//! Named parameter tensors and multilayer perceptrons.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// A named, row-major parameter block. Weights are `(out x in)`, biases `(1 x out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Mat<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Mat<T>) -> Self {
        Self { name: name.into(), value }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.value.rows, self.value.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Anything that owns an ordered list of parameter tensors.
pub trait Parameterized<T: Scalar> {
    fn tensors(&self) -> Vec<&ParamTensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    /// Put every tensor on the graph, in [`Parameterized::tensors`] order.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|p| p.value.len()).sum()
    }

    fn zero_all(&mut self) {
        for p in self.tensors_mut() {
            p.value.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Stable fingerprint of every parameter bit pattern.
    fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.tensors() {
            p.name.hash(&mut h);
            for v in &p.value.data {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Polyak averaging: `self <- tau * src + (1 - tau) * self`.
    fn soft_update_from(&mut self, src: &Self, tau: T)
    where
        Self: Sized,
    {
        for (dst, s) in self.tensors_mut().into_iter().zip(src.tensors()) {
            for (d, &v) in dst.value.data.iter_mut().zip(&s.value.data) {
                *d = tau * v + (T::one() - tau) * *d;
            }
        }
    }
}

/// Collect gradients for `vars` (as returned by `bind`) in tensor order.
pub fn collect_grads<T: Scalar>(
    model: &impl Parameterized<T>,
    vars: &[Var],
    grads: &super::graph::Grads<T>,
) -> Vec<Mat<T>> {
    model
        .tensors()
        .iter()
        .zip(vars)
        .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.fast_tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    fn apply_graph<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Mat<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Mat::from_vec(rows, cols, data)
}

/// Fully connected layer `y = act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
    pub act: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(rng: &mut R, name: &str, input: usize, output: usize, act: Activation, gain: f64) -> Self {
        Self {
            w: ParamTensor::new(format!("{name}.w"), init_uniform(rng, output, input, input, gain)),
            b: ParamTensor::new(format!("{name}.b"), init_uniform(rng, 1, output, input, gain)),
            act,
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize, act: Activation) -> Self {
        Self {
            w: ParamTensor::new(format!("{name}.w"), Mat::zeros(output, input)),
            b: ParamTensor::new(format!("{name}.b"), Mat::zeros(1, output)),
            act,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.rows
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w.value, true);
        y.add_row_broadcast(&self.b.value.data);
        let act = self.act;
        y.map(|v| act.apply(v))
    }

    /// `vars = [w, b]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Var {
        let y = g.linear(x, vars[0], Some(vars[1]));
        self.act.apply_graph(g, y)
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn tensors(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Multilayer perceptron: tanh hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, hidden.., out]`. `out_gain` scales the last layer's init.
    pub fn new<R: Rng>(rng: &mut R, name: &str, sizes: &[usize], out_gain: f64) -> Self {
        Self::with_activation(rng, name, sizes, Activation::Tanh, out_gain)
    }

    /// Like [`Mlp::new`] with a chosen hidden activation.
    pub fn with_activation<R: Rng>(rng: &mut R, name: &str, sizes: &[usize], hidden: Activation, out_gain: f64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                let act = if last { Activation::Identity } else { hidden };
                Dense::new(rng, &format!("{name}.{i}"), sizes[i], sizes[i + 1], act, if last { out_gain } else { 1.0 })
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(name: &str, sizes: &[usize]) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Tanh };
                Dense::zeros(&format!("{name}.{i}"), sizes[i], sizes[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    /// Rebuild from dense layers whose widths must chain.
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Checkpoint("MLP without layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Checkpoint("MLP layer widths do not chain".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.input_dim() {
            return Err(Error::DimMismatch { what: "mlp input", expected: self.input_dim(), got: x.cols });
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        Ok(h)
    }

    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(&Mat::row_vec(x))?.data)
    }

    /// `vars` as produced by [`Parameterized::bind`].
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Var {
        assert_eq!(g.shape(x).1, self.input_dim(), "mlp graph input width");
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward_graph(g, &vars[2 * i..2 * i + 2], h);
        }
        h
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&ParamTensor<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

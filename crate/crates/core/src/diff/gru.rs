//! Gated recurrent unit.
//!
//! Gate convention (row vectors, weights stored `(hidden x in)`):
//!
//! ```text
//! z  = sigmoid(x W_z^T + h U_z^T + b_z)        update gate
//! r  = sigmoid(x W_r^T + h U_r^T + b_r)        reset gate
//! n  = tanh(x W_n^T + r * (h U_n^T) + b_n)     candidate
//! h' = (1 - z) * n + z * h
//! ```
//!
//! A sequence is processed left to right and `outputs[t] = h_{t+1}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::nn::{init_uniform, ParamTensor, Parameterized};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCellParams<T> {
    pub w_z: ParamTensor<T>,
    pub u_z: ParamTensor<T>,
    pub b_z: ParamTensor<T>,
    pub w_r: ParamTensor<T>,
    pub u_r: ParamTensor<T>,
    pub b_r: ParamTensor<T>,
    pub w_n: ParamTensor<T>,
    pub u_n: ParamTensor<T>,
    pub b_n: ParamTensor<T>,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl<T: Scalar> GruCellParams<T> {
    pub fn new<R: Rng>(rng: &mut R, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let mut mk = |kind: &str, gate: &str, rows: usize, cols: usize| {
            ParamTensor::new(format!("{name}.{kind}_{gate}"), init_uniform(rng, rows, cols, hidden_dim, 1.0))
        };
        let [z, r, n] = GATES;
        Self {
            w_z: mk("w", z, hidden_dim, input_dim),
            u_z: mk("u", z, hidden_dim, hidden_dim),
            b_z: mk("b", z, 1, hidden_dim),
            w_r: mk("w", r, hidden_dim, input_dim),
            u_r: mk("u", r, hidden_dim, hidden_dim),
            b_r: mk("b", r, 1, hidden_dim),
            w_n: mk("w", n, hidden_dim, input_dim),
            u_n: mk("u", n, hidden_dim, hidden_dim),
            b_n: mk("b", n, 1, hidden_dim),
        }
    }

    pub fn zeros(name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let mk = |kind: &str, gate: &str, rows: usize, cols: usize| {
            ParamTensor::new(format!("{name}.{kind}_{gate}"), Mat::zeros(rows, cols))
        };
        let [z, r, n] = GATES;
        Self {
            w_z: mk("w", z, hidden_dim, input_dim),
            u_z: mk("u", z, hidden_dim, hidden_dim),
            b_z: mk("b", z, 1, hidden_dim),
            w_r: mk("w", r, hidden_dim, input_dim),
            u_r: mk("u", r, hidden_dim, hidden_dim),
            b_r: mk("b", r, 1, hidden_dim),
            w_n: mk("w", n, hidden_dim, input_dim),
            u_n: mk("u", n, hidden_dim, hidden_dim),
            b_n: mk("b", n, 1, hidden_dim),
        }
    }

    /// Validate shape consistency (used after loading a checkpoint).
    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        for (t, want) in [
            (&self.w_z, (h, i)),
            (&self.w_r, (h, i)),
            (&self.w_n, (h, i)),
            (&self.u_z, (h, h)),
            (&self.u_r, (h, h)),
            (&self.u_n, (h, h)),
            (&self.b_z, (1, h)),
            (&self.b_r, (1, h)),
            (&self.b_n, (1, h)),
        ] {
            if t.value.shape() != want {
                return Err(Error::Checkpoint(format!("{} has shape {:?}, want {:?}", t.name, t.value.shape(), want)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.value.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.value.rows
    }

    /// One recurrence step on a batch: `x` is `(B x in)`, `h` is `(B x hidden)`.
    pub fn step(&self, x: &Mat<T>, h: &Mat<T>) -> Mat<T> {
        let gate = |w: &ParamTensor<T>, u: &ParamTensor<T>, b: &ParamTensor<T>| {
            let mut a = x.matmul(&w.value, true);
            a.add_assign(&h.matmul(&u.value, true));
            a.add_row_broadcast(&b.value.data);
            a.map(|v| T::one() / (T::one() + (-v).exp()))
        };
        let z = gate(&self.w_z, &self.u_z, &self.b_z);
        let r = gate(&self.w_r, &self.u_r, &self.b_r);
        let mut n = x.matmul(&self.w_n.value, true);
        let hu = h.matmul(&self.u_n.value, true);
        n.add_row_broadcast(&self.b_n.value.data);
        for ((nv, &rv), &hv) in n.data.iter_mut().zip(&r.data).zip(&hu.data) {
            *nv = (*nv + rv * hv).fast_tanh();
        }
        let mut out = n;
        for ((o, &zv), &hv) in out.data.iter_mut().zip(&z.data).zip(&h.data) {
            *o = *o + zv * (hv - *o);
        }
        out
    }

    /// Graph version of [`GruCellParams::step`]; `vars` follow tensor order.
    pub fn step_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var, h: Var) -> Var {
        let [w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n] = vars[..9] else {
            panic!("gru cell expects 9 bound tensors")
        };
        let xz = g.linear(x, w_z, Some(b_z));
        let hz = g.linear(h, u_z, None);
        let az = g.add(xz, hz);
        let z = g.sigmoid(az);
        let xr = g.linear(x, w_r, Some(b_r));
        let hr = g.linear(h, u_r, None);
        let ar = g.add(xr, hr);
        let r = g.sigmoid(ar);
        let xn = g.linear(x, w_n, Some(b_n));
        let hn = g.linear(h, u_n, None);
        let rhn = g.mul(r, hn);
        let an = g.add(xn, rhn);
        let n = g.tanh(an);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    /// Run a whole sequence from `h0`; returns every hidden state and the last one.
    pub fn forward(&self, inputs: &[Vec<T>], h0: &[T]) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        if h0.len() != self.hidden_dim() {
            return Err(Error::DimMismatch { what: "gru h0", expected: self.hidden_dim(), got: h0.len() });
        }
        let mut h = Mat::row_vec(h0);
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.input_dim() {
                return Err(Error::DimMismatch { what: "gru input", expected: self.input_dim(), got: x.len() });
            }
            h = self.step(&Mat::row_vec(x), &h);
            outputs.push(h.data.clone());
        }
        let last = h.data;
        Ok((outputs, last))
    }
}

impl<T: Scalar> Parameterized<T> for GruCellParams<T> {
    fn tensors(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_n, &self.u_n, &self.b_n]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_n,
            &mut self.u_n,
            &mut self.b_n,
        ]
    }
}

/// Free-function form of [`GruCellParams::forward`].
pub fn gru_forward<T: Scalar>(cell: &GruCellParams<T>, inputs: &[Vec<T>], h0: &[T]) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    cell.forward(inputs, h0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_keep_zero_state() {
        let cell = GruCellParams::<f64>::zeros("g", 3, 4);
        let inputs = vec![vec![1.0, -2.0, 0.5]; 5];
        let (outs, last) = cell.forward(&inputs, &[0.0; 4]).unwrap();
        assert!(outs.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(last, vec![0.0; 4]);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let cell = GruCellParams::<f64>::zeros("g", 2, 2);
        assert!(matches!(cell.forward(&[], &[0.0, 0.0]), Err(Error::EmptySequence)));
    }

    #[test]
    fn length_one_equals_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = GruCellParams::<f64>::new(&mut rng, "g", 3, 5);
        let x = vec![0.2, -0.4, 0.9];
        let h0 = vec![0.1, 0.0, -0.3, 0.5, 0.2];
        let (_, last) = cell.forward(std::slice::from_ref(&x), &h0).unwrap();
        let stepped = cell.step(&Mat::row_vec(&x), &Mat::row_vec(&h0));
        assert_eq!(last, stepped.data);
    }

    #[test]
    fn graph_step_matches_plain_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = GruCellParams::<f64>::new(&mut rng, "g", 3, 4);
        let x = Mat::from_vec(2, 3, vec![0.1, 0.5, -0.2, 0.3, -0.8, 0.4]);
        let h = Mat::from_vec(2, 4, vec![0.0, 0.1, 0.2, -0.3, 0.5, -0.1, 0.0, 0.2]);
        let mut g = Graph::new();
        let vars = cell.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let hv = g.constant(h.clone());
        let out = cell.step_graph(&mut g, &vars, xv, hv);
        let plain = cell.step(&x, &h);
        for (a, b) in g.value(out).data.iter().zip(&plain.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

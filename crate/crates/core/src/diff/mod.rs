//! Differentiable substrate: a reverse-mode graph over dense matrices plus
//! the layers built on it (MLP, GRU), Gaussian helpers and Adam.

pub mod dist;
pub mod graph;
pub mod gru;
pub mod nn;
pub mod optim;

pub use dist::{gaussian_reparam_sample, kl_diag_gaussian};
pub use graph::{Grads, Graph, Var};
pub use gru::{gru_forward, GruCellParams};
pub use nn::{collect_grads, Activation, Dense, Mlp, ParamTensor, Parameterized};
pub use optim::{Adam, AdamConfig};

//! Minimal double-precision numeric kernel shared by every model component.

mod activation;
mod dense;
mod dropout;
mod gradcheck;
mod matrix;
mod params;

pub use activation::{activate, activate_in_place, activation_backward, sigmoid, Activation};
pub use dense::DenseLayer;
pub use dropout::{dropout_apply, dropout_mask};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub(crate) use params::join as params_join;
pub use params::{l2_penalty, ParamEntry, ParamKind, ParamVector, Params, ParamsMut};

use rand::Rng as _;

use crate::rng::Rng;

/// Uniform initialisation in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent")
}

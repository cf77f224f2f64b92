use serde::{Deserialize, Serialize};

use super::activation::{activate_in_place, activation_backward, Activation};
use super::matrix::Matrix;
use super::params::{join, ParamKind, Params, ParamsMut};
use crate::rng::Rng;
use crate::{Error, Result};

/// Fully connected layer `activation(W·x + b)` with `W` of shape (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::dim("dense layer bias", weights.rows(), bias.len()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            weights: super::glorot_uniform(output, input, rng),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows()
    }

    /// Same shape and activation, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_width(), self.output_width(), self.activation)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::dim(
                format!("dense layer {}→{} input", self.input_width(), self.output_width()),
                self.input_width(),
                x.len(),
            ));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        self.weights.matvec_acc(x, &mut z);
        activate_in_place(self.activation, &mut z);
        z
    }

    /// Reverse-mode gradients `(dx, dW, db)` for upstream gradient `dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Matrix, Vec<f64>)> {
        let y = self.forward(x)?;
        if dy.len() != y.len() {
            return Err(Error::dim("dense layer upstream gradient", y.len(), dy.len()));
        }
        let mut grads = self.zeros_like();
        let dx = self.backward_acc(x, &y, dy, &mut grads);
        Ok((dx, grads.weights, grads.bias))
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub(crate) fn backward_acc(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut DenseLayer,
    ) -> Vec<f64> {
        let dz = activation_backward(self.activation, y, dy);
        grads.weights.add_outer(&dz, x);
        grads.bias.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        self.weights.t_matvec(&dz)
    }
}

impl Params for DenseLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        f(&join(prefix, "weights"), ParamKind::Weight, self.weights.as_slice());
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }
}

impl ParamsMut for DenseLayer {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        f(&join(prefix, "weights"), ParamKind::Weight, self.weights.as_mut_slice());
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

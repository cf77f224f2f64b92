//! Basic recurrent cell with softmax read-out, full BPTT, and the network that
//! maps the first embedded visit plus static covariates to the initial state.

use serde::{Deserialize, Serialize};

use crate::nn::{
    activate_in_place, activation_backward, glorot_uniform, Activation, DenseLayer, Matrix,
    ParamKind, Params, ParamsMut,
};
use crate::rng::Rng;
use crate::{Error, Result};

/// `h_i = tanh(W_hx x_i + W_hh h_{i-1} + b_h)`, `o_i = softmax(W_yh h_i + b_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub w_hx: Matrix,
    pub w_hh: Matrix,
    pub b_h: Vec<f64>,
    pub w_yh: Matrix,
    pub b_y: Vec<f64>,
}

/// States and outputs of a forward pass; both have one entry per input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RnnTrace {
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl RnnCell {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w_hx: Matrix::zeros(hidden, input),
            w_hh: Matrix::zeros(hidden, hidden),
            b_h: vec![0.0; hidden],
            w_yh: Matrix::zeros(output, hidden),
            b_y: vec![0.0; output],
        }
    }

    pub fn glorot(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w_hx: glorot_uniform(hidden, input, rng),
            w_hh: glorot_uniform(hidden, hidden, rng),
            b_h: vec![0.0; hidden],
            w_yh: glorot_uniform(output, hidden, rng),
            b_y: vec![0.0; output],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_width(), self.hidden_width(), self.output_width())
    }

    pub fn input_width(&self) -> usize {
        self.w_hx.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w_yh.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_width();
        if self.w_hh.cols() != h {
            return Err(Error::dim("W_hh columns", h, self.w_hh.cols()));
        }
        if self.w_hx.rows() != h {
            return Err(Error::dim("W_hx rows", h, self.w_hx.rows()));
        }
        if self.b_h.len() != h {
            return Err(Error::dim("b_h", h, self.b_h.len()));
        }
        if self.w_yh.cols() != h {
            return Err(Error::dim("W_yh columns", h, self.w_yh.cols()));
        }
        if self.b_y.len() != self.output_width() {
            return Err(Error::dim("b_y", self.output_width(), self.b_y.len()));
        }
        Ok(())
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::dim("rnn step input", self.input_width(), x.len()));
        }
        if h_prev.len() != self.hidden_width() {
            return Err(Error::dim("rnn step state", self.hidden_width(), h_prev.len()));
        }
        Ok(self.step_unchecked(x, h_prev))
    }

    fn step_unchecked(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let mut h = self.b_h.clone();
        self.w_hx.matvec_acc(x, &mut h);
        self.w_hh.matvec_acc(h_prev, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    pub fn output(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.hidden_width() {
            return Err(Error::dim("rnn output state", self.hidden_width(), h.len()));
        }
        Ok(self.output_unchecked(h))
    }

    fn output_unchecked(&self, h: &[f64]) -> Vec<f64> {
        let mut o = self.b_y.clone();
        self.w_yh.matvec_acc(h, &mut o);
        activate_in_place(Activation::Softmax, &mut o);
        o
    }

    pub fn forward(&self, xs: &[Vec<f64>], h0: &[f64]) -> Result<RnnTrace> {
        if h0.len() != self.hidden_width() {
            return Err(Error::dim("rnn initial state", self.hidden_width(), h0.len()));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.input_width()) {
            return Err(Error::dim("rnn sequence input", self.input_width(), x.len()));
        }
        Ok(self.forward_unchecked(xs, h0))
    }

    pub(crate) fn forward_unchecked(&self, xs: &[Vec<f64>], h0: &[f64]) -> RnnTrace {
        let mut trace = RnnTrace {
            states: Vec::with_capacity(xs.len()),
            outputs: Vec::with_capacity(xs.len()),
        };
        for (i, x) in xs.iter().enumerate() {
            let prev = if i == 0 { h0 } else { &trace.states[i - 1] };
            let h = self.step_unchecked(x, prev);
            trace.outputs.push(self.output_unchecked(&h));
            trace.states.push(h);
        }
        trace
    }

    /// Full backpropagation through time.
    ///
    /// `d_outputs[i]` is the upstream gradient on `o_i`, `d_states_extra[i]` an
    /// optional extra gradient on `h_i`. Returns `(grads, d_xs, d_h0)`.
    pub fn backward(
        &self,
        xs: &[Vec<f64>],
        h0: &[f64],
        trace: &RnnTrace,
        d_outputs: &[Vec<f64>],
        d_states_extra: Option<&[Vec<f64>]>,
    ) -> Result<(RnnCell, Vec<Vec<f64>>, Vec<f64>)> {
        let n = xs.len();
        if trace.states.len() != n || trace.outputs.len() != n {
            return Err(Error::dim("rnn trace length", n, trace.states.len()));
        }
        if d_outputs.len() != n {
            return Err(Error::dim("rnn output gradients", n, d_outputs.len()));
        }
        if let Some(extra) = d_states_extra {
            if extra.len() != n {
                return Err(Error::dim("rnn state gradients", n, extra.len()));
            }
        }
        let mut grads = self.zeros_like();
        let (d_xs, d_h0) =
            self.backward_acc(xs, h0, trace, d_outputs, d_states_extra, &mut grads);
        Ok((grads, d_xs, d_h0))
    }

    pub(crate) fn backward_acc(
        &self,
        xs: &[Vec<f64>],
        h0: &[f64],
        trace: &RnnTrace,
        d_outputs: &[Vec<f64>],
        d_states_extra: Option<&[Vec<f64>]>,
        grads: &mut RnnCell,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = xs.len();
        let hidden = self.hidden_width();
        let mut d_xs = vec![Vec::new(); n];
        let mut carry = vec![0.0; hidden];
        for i in (0..n).rev() {
            let h = &trace.states[i];
            let mut dh = carry;
            if let Some(extra) = d_states_extra {
                dh.iter_mut().zip(&extra[i]).for_each(|(a, b)| *a += b);
            }
            let d_out = &d_outputs[i];
            if d_out.iter().any(|v| *v != 0.0) {
                let dz = activation_backward(Activation::Softmax, &trace.outputs[i], d_out);
                grads.w_yh.add_outer(&dz, h);
                grads.b_y.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
                self.w_yh.t_matvec_acc(&dz, &mut dh);
            }
            let dpre: Vec<f64> = dh.iter().zip(h).map(|(d, h)| d * (1.0 - h * h)).collect();
            let h_prev = if i == 0 { h0 } else { &trace.states[i - 1] };
            grads.w_hx.add_outer(&dpre, &xs[i]);
            grads.w_hh.add_outer(&dpre, h_prev);
            grads.b_h.iter_mut().zip(&dpre).for_each(|(g, d)| *g += d);
            d_xs[i] = self.w_hx.t_matvec(&dpre);
            carry = self.w_hh.t_matvec(&dpre);
        }
        (d_xs, carry)
    }
}

impl Params for RnnCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        f(&join(prefix, "w_hx"), ParamKind::Weight, self.w_hx.as_slice());
        f(&join(prefix, "w_hh"), ParamKind::Weight, self.w_hh.as_slice());
        f(&join(prefix, "b_h"), ParamKind::Bias, &self.b_h);
        f(&join(prefix, "w_yh"), ParamKind::Weight, self.w_yh.as_slice());
        f(&join(prefix, "b_y"), ParamKind::Bias, &self.b_y);
    }
}

impl ParamsMut for RnnCell {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        f(&join(prefix, "w_hx"), ParamKind::Weight, self.w_hx.as_mut_slice());
        f(&join(prefix, "w_hh"), ParamKind::Weight, self.w_hh.as_mut_slice());
        f(&join(prefix, "b_h"), ParamKind::Bias, &mut self.b_h);
        f(&join(prefix, "w_yh"), ParamKind::Weight, self.w_yh.as_mut_slice());
        f(&join(prefix, "b_y"), ParamKind::Bias, &mut self.b_y);
    }
}

/// Two tanh layers mapping `[embedded first visit ; sex ; age]` to the
/// clinician cell's initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateNet {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
}

/// Intermediates of [`InitialStateNet::forward_cached`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStateCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub h0: Vec<f64>,
}

impl InitialStateNet {
    pub fn zeros(embedded: usize, hidden: usize, state: usize) -> Self {
        Self {
            layer1: DenseLayer::zeros(embedded + 2, hidden, Activation::Tanh),
            layer2: DenseLayer::zeros(hidden, state, Activation::Tanh),
        }
    }

    pub fn glorot(embedded: usize, hidden: usize, state: usize, rng: &mut Rng) -> Self {
        Self {
            layer1: DenseLayer::glorot(embedded + 2, hidden, Activation::Tanh, rng),
            layer2: DenseLayer::glorot(hidden, state, Activation::Tanh, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.layer2.output_width()
    }

    /// `static_features` is `[sex, normalised age]`.
    pub fn forward(&self, embedded_first: &[f64], static_features: [f64; 2]) -> Result<Vec<f64>> {
        let expected = self.layer1.input_width();
        if embedded_first.len() + 2 != expected {
            return Err(Error::dim(
                "initial-state net input",
                expected.saturating_sub(2),
                embedded_first.len(),
            ));
        }
        Ok(self.forward_cached(embedded_first, static_features).h0)
    }

    pub(crate) fn forward_cached(
        &self,
        embedded_first: &[f64],
        static_features: [f64; 2],
    ) -> InitialStateCache {
        let mut input = embedded_first.to_vec();
        input.extend_from_slice(&static_features);
        let hidden = self.layer1.forward_unchecked(&input);
        let h0 = self.layer2.forward_unchecked(&hidden);
        InitialStateCache { input, hidden, h0 }
    }

    /// Accumulates into `grads`; returns the gradient on the embedded first visit.
    pub(crate) fn backward_acc(
        &self,
        cache: &InitialStateCache,
        d_h0: &[f64],
        grads: &mut InitialStateNet,
    ) -> Vec<f64> {
        let d_hidden = self
            .layer2
            .backward_acc(&cache.hidden, &cache.h0, d_h0, &mut grads.layer2);
        let mut d_input = self
            .layer1
            .backward_acc(&cache.input, &cache.hidden, &d_hidden, &mut grads.layer1);
        d_input.truncate(d_input.len() - 2);
        d_input
    }
}

impl Params for InitialStateNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        self.layer1.visit(&join(prefix, "layer1"), f);
        self.layer2.visit(&join(prefix, "layer2"), f);
    }
}

impl ParamsMut for InitialStateNet {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        self.layer1.visit_mut(&join(prefix, "layer1"), f);
        self.layer2.visit_mut(&join(prefix, "layer2"), f);
    }
}

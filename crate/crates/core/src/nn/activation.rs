use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softmax,
    Relu,
    Linear,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Applies `kind` to `v`, rejecting non-finite input.
pub fn activate(kind: Activation, v: &[f64]) -> Result<Vec<f64>> {
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{kind:?} activation received non-finite value {} at index {pos}",
            v[pos]
        )));
    }
    let mut out = v.to_vec();
    activate_in_place(kind, &mut out);
    Ok(out)
}

/// Unchecked in-place variant used on hot paths.
pub fn activate_in_place(kind: Activation, v: &mut [f64]) {
    match kind {
        Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Linear => {}
        Activation::Softmax => {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in v.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            v.iter_mut().for_each(|x| *x /= total);
        }
    }
}

/// Maps the gradient w.r.t. the activation output `y` back onto its input.
pub fn activation_backward(kind: Activation, y: &[f64], dy: &[f64]) -> Vec<f64> {
    match kind {
        Activation::Tanh => y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect(),
        Activation::Sigmoid => y.iter().zip(dy).map(|(y, d)| d * y * (1.0 - y)).collect(),
        Activation::Relu => y
            .iter()
            .zip(dy)
            .map(|(y, d)| if *y > 0.0 { *d } else { 0.0 })
            .collect(),
        Activation::Linear => dy.to_vec(),
        Activation::Softmax => {
            let dot: f64 = y.iter().zip(dy).map(|(y, d)| y * d).sum();
            y.iter().zip(dy).map(|(y, d)| y * (d - dot)).collect()
        }
    }
}

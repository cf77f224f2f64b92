use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Inverted-dropout scale mask: each entry is 0 with probability `p_drop`,
/// otherwise `1 / (1 - p_drop)`.
pub fn dropout_mask(len: usize, p_drop: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!(
            "dropout probability must lie in [0, 1), got {p_drop}"
        )));
    }
    if p_drop == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p_drop);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { keep })
        .collect())
}

/// Returns the dropped-out vector and the binary keep mask.
///
/// At inference (`training == false`) the input passes through unchanged.
pub fn dropout_apply(
    v: &[f64],
    p_drop: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!(
            "dropout probability must lie in [0, 1), got {p_drop}"
        )));
    }
    if !training {
        return Ok((v.to_vec(), vec![true; v.len()]));
    }
    let scale = dropout_mask(v.len(), p_drop, rng)?;
    let out = v.iter().zip(&scale).map(|(x, s)| x * s).collect();
    Ok((out, scale.iter().map(|s| *s != 0.0).collect()))
}

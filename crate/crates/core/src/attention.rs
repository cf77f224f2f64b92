//! Windowed attention over the previous `L` outputs of the patient cell.
//!
//! For output `o_j` with memory `Y = [o_{j-L} … o_{j-1}]` (zero columns where
//! the history is shorter than `L`):
//!
//! ```text
//! M  = tanh(W_Y·Y + (W_o·o_j)·1ᵀ)
//! α  = softmax(wᵀ·M)
//! r  = Y·αᵀ
//! o* = tanh(W_r·r + W_x·o_j)
//! ```

use serde::{Deserialize, Serialize};

use crate::nn::{activate_in_place, glorot_uniform, Activation, Matrix, ParamKind, Params, ParamsMut};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_y: Matrix,
    pub w_o: Matrix,
    pub w: Vec<f64>,
    pub w_r: Matrix,
    pub w_x: Matrix,
    pub window: usize,
}

/// Everything the backward pass needs for one attended position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    /// k × L memory.
    pub memory: Matrix,
    /// k × L, `tanh` of the combined projections.
    pub m: Matrix,
    pub alpha: Vec<f64>,
    pub r: Vec<f64>,
    pub o_star: Vec<f64>,
}

/// Parameter gradients plus gradients on the memory and the current output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub params: AttentionBlock,
    pub d_memory: Matrix,
    pub d_o: Vec<f64>,
}

/// Columns `[o_{j-L} … o_{j-1}]`, left-padded with zeros when `j < L`.
pub fn window_memory(outputs: &[Vec<f64>], j: usize, window: usize) -> Matrix {
    let k = outputs.first().map_or(0, Vec::len);
    let mut memory = Matrix::zeros(k, window);
    for col in 0..window {
        // column `col` holds o_{j - window + col}
        if let Some(src) = (j + col).checked_sub(window) {
            for (r, v) in outputs[src].iter().enumerate() {
                memory.set(r, col, *v);
            }
        }
    }
    memory
}

impl AttentionBlock {
    pub fn zeros(k: usize, window: usize) -> Self {
        Self {
            w_y: Matrix::zeros(k, k),
            w_o: Matrix::zeros(k, k),
            w: vec![0.0; k],
            w_r: Matrix::zeros(k, k),
            w_x: Matrix::zeros(k, k),
            window,
        }
    }

    pub fn glorot(k: usize, window: usize, rng: &mut Rng) -> Self {
        Self {
            w_y: glorot_uniform(k, k, rng),
            w_o: glorot_uniform(k, k, rng),
            w: glorot_uniform(1, k, rng).as_slice().to_vec(),
            w_r: glorot_uniform(k, k, rng),
            w_x: glorot_uniform(k, k, rng),
            window,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.window)
    }

    pub fn width(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.width();
        if self.window == 0 {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        for (name, m) in [("W_Y", &self.w_y), ("W_o", &self.w_o), ("W_r", &self.w_r), ("W_x", &self.w_x)] {
            if m.rows() != k || m.cols() != k {
                return Err(Error::dim(format!("attention {name}"), k * k, m.rows() * m.cols()));
            }
        }
        Ok(())
    }

    fn check_shapes(&self, memory: &Matrix, o: &[f64]) -> Result<()> {
        let k = self.width();
        if memory.rows() != k {
            return Err(Error::dim("attention memory rows", k, memory.rows()));
        }
        if memory.cols() == 0 {
            return Err(Error::dim("attention memory columns", self.window, 0));
        }
        if o.len() != k {
            return Err(Error::dim("attention current output", k, o.len()));
        }
        Ok(())
    }

    /// Returns `(M, α)`.
    pub fn scores(&self, memory: &Matrix, o: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        self.check_shapes(memory, o)?;
        Ok(self.scores_unchecked(memory, o))
    }

    fn scores_unchecked(&self, memory: &Matrix, o: &[f64]) -> (Matrix, Vec<f64>) {
        let k = self.width();
        let len = memory.cols();
        let proj_o = self.w_o.matvec(o);
        let mut m = Matrix::zeros(k, len);
        let mut scores = vec![0.0; len];
        for col in 0..len {
            let y = memory.column(col);
            let mut a = proj_o.clone();
            self.w_y.matvec_acc(&y, &mut a);
            for (r, v) in a.iter().enumerate() {
                let t = v.tanh();
                m.set(r, col, t);
                scores[col] += self.w[r] * t;
            }
        }
        activate_in_place(Activation::Softmax, &mut scores);
        (m, scores)
    }

    /// Returns `(r, o*)`.
    pub fn apply(&self, memory: &Matrix, alpha: &[f64], o: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_shapes(memory, o)?;
        if alpha.len() != memory.cols() {
            return Err(Error::dim("attention weights", memory.cols(), alpha.len()));
        }
        Ok(self.apply_unchecked(memory, alpha, o))
    }

    fn apply_unchecked(&self, memory: &Matrix, alpha: &[f64], o: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = memory.matvec(alpha);
        let mut o_star = self.w_r.matvec(&r);
        self.w_x.matvec_acc(o, &mut o_star);
        o_star.iter_mut().for_each(|v| *v = v.tanh());
        (r, o_star)
    }

    pub fn forward(&self, memory: &Matrix, o: &[f64]) -> Result<AttentionCache> {
        self.check_shapes(memory, o)?;
        Ok(self.forward_unchecked(memory.clone(), o))
    }

    pub(crate) fn forward_unchecked(&self, memory: Matrix, o: &[f64]) -> AttentionCache {
        let (m, alpha) = self.scores_unchecked(&memory, o);
        let (r, o_star) = self.apply_unchecked(&memory, &alpha, o);
        AttentionCache {
            memory,
            m,
            alpha,
            r,
            o_star,
        }
    }

    pub fn backward(&self, memory: &Matrix, o: &[f64], d_o_star: &[f64]) -> Result<AttentionGrads> {
        let cache = self.forward(memory, o)?;
        if d_o_star.len() != self.width() {
            return Err(Error::dim("attention upstream gradient", self.width(), d_o_star.len()));
        }
        let mut params = self.zeros_like();
        let (d_memory, d_o) = self.backward_acc(&cache, o, d_o_star, &mut params);
        Ok(AttentionGrads {
            params,
            d_memory,
            d_o,
        })
    }

    /// Accumulates parameter gradients; returns `(dY, d o_j)`.
    pub(crate) fn backward_acc(
        &self,
        cache: &AttentionCache,
        o: &[f64],
        d_o_star: &[f64],
        grads: &mut AttentionBlock,
    ) -> (Matrix, Vec<f64>) {
        let k = self.width();
        let len = cache.memory.cols();
        let d_pre: Vec<f64> = d_o_star
            .iter()
            .zip(&cache.o_star)
            .map(|(d, s)| d * (1.0 - s * s))
            .collect();
        grads.w_r.add_outer(&d_pre, &cache.r);
        grads.w_x.add_outer(&d_pre, o);
        let d_r = self.w_r.t_matvec(&d_pre);
        let mut d_o = self.w_x.t_matvec(&d_pre);

        let mut d_memory = Matrix::zeros(k, len);
        let mut d_alpha = vec![0.0; len];
        for col in 0..len {
            for row in 0..k {
                d_memory.set(row, col, cache.alpha[col] * d_r[row]);
                d_alpha[col] += cache.memory.get(row, col) * d_r[row];
            }
        }
        let dot: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let d_scores: Vec<f64> = cache
            .alpha
            .iter()
            .zip(&d_alpha)
            .map(|(a, d)| a * (d - dot))
            .collect();

        let mut d_a_sum = vec![0.0; k];
        for (col, ds) in d_scores.iter().enumerate() {
            if *ds == 0.0 {
                continue;
            }
            let m_col = cache.m.column(col);
            let y_col = cache.memory.column(col);
            grads.w.iter_mut().zip(&m_col).for_each(|(g, m)| *g += ds * m);
            let d_a: Vec<f64> = m_col
                .iter()
                .zip(&self.w)
                .map(|(m, w)| ds * w * (1.0 - m * m))
                .collect();
            grads.w_y.add_outer(&d_a, &y_col);
            let back = self.w_y.t_matvec(&d_a);
            for (row, b) in back.iter().enumerate() {
                d_memory.set(row, col, d_memory.get(row, col) + b);
            }
            d_a_sum.iter_mut().zip(&d_a).for_each(|(s, d)| *s += d);
        }
        grads.w_o.add_outer(&d_a_sum, o);
        self.w_o.t_matvec_acc(&d_a_sum, &mut d_o);
        (d_memory, d_o)
    }
}

impl Params for AttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        f(&join(prefix, "w_y"), ParamKind::Weight, self.w_y.as_slice());
        f(&join(prefix, "w_o"), ParamKind::Weight, self.w_o.as_slice());
        f(&join(prefix, "w"), ParamKind::Weight, &self.w);
        f(&join(prefix, "w_r"), ParamKind::Weight, self.w_r.as_slice());
        f(&join(prefix, "w_x"), ParamKind::Weight, self.w_x.as_slice());
    }
}

impl ParamsMut for AttentionBlock {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        f(&join(prefix, "w_y"), ParamKind::Weight, self.w_y.as_mut_slice());
        f(&join(prefix, "w_o"), ParamKind::Weight, self.w_o.as_mut_slice());
        f(&join(prefix, "w"), ParamKind::Weight, &mut self.w);
        f(&join(prefix, "w_r"), ParamKind::Weight, self.w_r.as_mut_slice());
        f(&join(prefix, "w_x"), ParamKind::Weight, self.w_x.as_mut_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, ParamVector};
    use crate::rng::substream;
    use rand::Rng as _;

    fn outputs(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "attn-out", 0);
        (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn block(k: usize, window: usize, seed: u64) -> AttentionBlock {
        AttentionBlock::glorot(k, window, &mut substream(seed, "attn", 0))
    }

    #[test]
    fn first_position_is_fully_padded() {
        let outs = outputs(4, 3, 1);
        let memory = window_memory(&outs, 0, 3);
        assert_eq!(memory, Matrix::zeros(3, 3));
    }

    #[test]
    fn unit_window_holds_previous_output() {
        let outs = outputs(5, 3, 2);
        assert_eq!(window_memory(&outs, 3, 1).column(0), outs[2]);
    }

    #[test]
    fn partial_history_is_left_padded() {
        let outs = outputs(5, 3, 3);
        let memory = window_memory(&outs, 2, 4);
        // index arithmetic: column c holds o_{j-L+c} when that index is >= 0
        for c in 0..4usize {
            let expected = match (2 + c).checked_sub(4) {
                Some(src) => outs[src].clone(),
                None => vec![0.0; 3],
            };
            assert_eq!(memory.column(c), expected);
        }
        assert_eq!(memory.column(2), outs[0]);
        assert_eq!(memory.column(3), outs[1]);
    }

    #[test]
    fn unit_window_weight_is_exactly_one() {
        let b = block(3, 1, 4);
        let outs = outputs(3, 3, 4);
        let (_, alpha) = b.scores(&window_memory(&outs, 2, 1), &outs[2]).unwrap();
        assert_eq!(alpha, vec![1.0]);
    }

    #[test]
    fn zero_score_vector_gives_uniform_weights() {
        let mut b = block(3, 4, 5);
        b.w = vec![0.0; 3];
        let outs = outputs(6, 3, 5);
        let (_, alpha) = b.scores(&window_memory(&outs, 5, 4), &outs[5]).unwrap();
        for a in alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_match_direct_formula() {
        let b = block(3, 2, 6);
        let outs = outputs(4, 3, 6);
        let memory = window_memory(&outs, 3, 2);
        let (m, alpha) = b.scores(&memory, &outs[3]).unwrap();
        let mut raw = [0.0f64; 2];
        for col in 0..2 {
            for r in 0..3 {
                let mut a = 0.0;
                for c in 0..3 {
                    a += b.w_y.get(r, c) * memory.get(c, col) + b.w_o.get(r, c) * outs[3][c];
                }
                assert!((m.get(r, col) - a.tanh()).abs() < 1e-12);
                raw[col] += b.w[r] * a.tanh();
            }
        }
        let denom = raw[0].exp() + raw[1].exp();
        for col in 0..2 {
            assert!((alpha[col] - raw[col].exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_memory_reduces_to_current_output_projection() {
        let b = block(3, 2, 7);
        let outs = outputs(1, 3, 7);
        let memory = window_memory(&outs, 0, 2);
        let cache = b.forward(&memory, &outs[0]).unwrap();
        assert_eq!(cache.r, vec![0.0; 3]);
        let expected: Vec<f64> = b.w_x.matvec(&outs[0]).iter().map(|v| v.tanh()).collect();
        assert_eq!(cache.o_star, expected);
    }

    #[test]
    fn unit_window_reduces_to_two_projections() {
        let b = block(4, 1, 8);
        let outs = outputs(5, 4, 8);
        let cache = b.forward(&window_memory(&outs, 4, 1), &outs[4]).unwrap();
        assert_eq!(cache.r, outs[3]);
        for r in 0..4 {
            let mut z = 0.0;
            for c in 0..4 {
                z += b.w_r.get(r, c) * outs[3][c] + b.w_x.get(r, c) * outs[4][c];
            }
            assert!((cache.o_star[r] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = block(3, 2, 9);
        assert!(b.scores(&Matrix::zeros(2, 2), &[0.0; 3]).is_err());
        assert!(b.scores(&Matrix::zeros(3, 2), &[0.0; 2]).is_err());
        assert!(b.apply(&Matrix::zeros(3, 2), &[1.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let b = block(3, 3, 10);
        let outs = outputs(5, 3, 10);
        let g = b.backward(&window_memory(&outs, 4, 3), &outs[4], &[0.0; 3]).unwrap();
        assert!(ParamVector::flatten(&g.params).values.iter().all(|v| *v == 0.0));
        assert!(g.d_memory.as_slice().iter().chain(&g.d_o).all(|v| *v == 0.0));
    }

    #[test]
    fn unit_window_score_path_has_zero_gradient() {
        let b = block(3, 1, 11);
        let outs = outputs(3, 3, 11);
        let g = b.backward(&window_memory(&outs, 2, 1), &outs[2], &[0.4, -1.0, 0.3]).unwrap();
        assert_eq!(g.params.w, vec![0.0; 3]);
        assert!(g.params.w_y.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.params.w_o.as_slice().iter().all(|v| *v == 0.0));
    }

    fn gradient_error(k: usize, window: usize, j: usize, seed: u64) -> f64 {
        let b = block(k, window, seed);
        let outs = outputs(j + 1, k, seed + 1);
        let memory = window_memory(&outs, j, window);
        let o = outs[j].clone();
        let mut rng = substream(seed, "attn-up", 0);
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_params = ParamVector::flatten(&b).len();
        let mut theta = ParamVector::flatten(&b).values;
        theta.extend(memory.as_slice());
        theta.extend(&o);
        let unpack = |theta: &[f64]| {
            let mut bb = b.clone();
            let mut pv = ParamVector::flatten(&b);
            pv.values.copy_from_slice(&theta[..n_params]);
            pv.unflatten_into(&mut bb).unwrap();
            let mem = Matrix::from_vec(k, window, theta[n_params..n_params + k * window].to_vec()).unwrap();
            (bb, mem, theta[n_params + k * window..].to_vec())
        };
        grad_check(
            |theta| {
                let (bb, mem, o) = unpack(theta);
                let cache = bb.forward(&mem, &o).unwrap();
                cache.o_star.iter().zip(&c).map(|(a, b)| a * b).sum()
            },
            |theta| {
                let (bb, mem, o) = unpack(theta);
                let g = bb.backward(&mem, &o, &c).unwrap();
                let mut out = ParamVector::flatten(&g.params).values;
                out.extend(g.d_memory.as_slice());
                out.extend(g.d_o);
                out
            },
            &theta,
            1e-5,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn backward_matches_finite_differences() {
        assert!(gradient_error(3, 3, 4, 20) < 1e-4);
        assert!(gradient_error(4, 2, 3, 30) < 1e-4);
        assert!(gradient_error(3, 1, 2, 40) < 1e-4);
    }

    #[test]
    fn outputs_bounded_and_weights_normalised() {
        let b = block(5, 4, 12);
        let outs: Vec<Vec<f64>> = outputs(9, 5, 12)
            .into_iter()
            .map(|o| o.into_iter().map(|v| v * 20.0).collect())
            .collect();
        for j in 0..outs.len() {
            let cache = b.forward(&window_memory(&outs, j, 4), &outs[j]).unwrap();
            assert!((cache.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(cache.o_star.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn context_vector_is_consistent_under_column_permutation() {
        let outs = outputs(6, 3, 13);
        let memory = window_memory(&outs, 5, 4);
        let alpha = [0.1, 0.2, 0.3, 0.4];
        let b = block(3, 4, 13);
        let (r, _) = b.apply(&memory, &alpha, &outs[5]).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Matrix::zeros(3, 4);
        for (dst, &src) in perm.iter().enumerate() {
            for row in 0..3 {
                permuted.set(row, dst, memory.get(row, src));
            }
        }
        let p_alpha: Vec<f64> = perm.iter().map(|&s| alpha[s]).collect();
        let (r2, _) = b.apply(&permuted, &p_alpha, &outs[5]).unwrap();
        for (a, b) in r.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

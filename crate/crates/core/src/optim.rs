//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = shapes.into_iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { step: 0, second: first.clone(), first }
    }

    /// One update of the tensors whose `trainable` flag is set, at learning
    /// rate `lr`. Frozen tensors and their moments are left untouched.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], trainable: &[bool], cfg: &AdamConfig, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() || trainable.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} tensors, {} gradients, {} moment slots, {} flags",
                params.len(),
                grads.len(),
                self.first.len(),
                trainable.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for tensor {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// L2 norm over the flagged gradients.
pub fn global_norm(grads: &[Matrix], trainable: &[bool]) -> f64 {
    grads.iter().zip(trainable).filter(|(_, &t)| t).map(|(g, _)| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales the flagged gradients so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], trainable: &[bool], max_norm: f64) -> f64 {
    let total = global_norm(grads, trainable);
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for (g, _) in grads.iter_mut().zip(trainable).filter(|(_, &t)| t) {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Matrix::row_vector(&[1.0, -2.0]);
        let mut adam = Adam::new([&w]);
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let g = Matrix::row_vector(&[3.0, -0.5]);
        adam.update(vec![&mut w], &[g], &[true], &cfg, 0.1).unwrap();
        // Bias-corrected first step is lr · sign(g) up to epsilon.
        assert!((w.get(0, 0) - 0.9).abs() < 1e-8);
        assert!((w.get(0, 1) + 1.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_tensors_stay_put() {
        let mut a = Matrix::row_vector(&[1.0]);
        let mut b = Matrix::row_vector(&[1.0]);
        let mut adam = Adam::new([&a, &b]);
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let g = [Matrix::row_vector(&[1.0]), Matrix::row_vector(&[1.0])];
        adam.update(vec![&mut a, &mut b], &g, &[false, true], &cfg, 0.1).unwrap();
        assert_eq!(a.get(0, 0), 1.0);
        assert!(b.get(0, 0) < 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0]), Matrix::row_vector(&[12.0])];
        let before = clip_gradients(&mut g, &[true, true], 1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!(global_norm(&g, &[true, true]) <= 1.0 + 1e-9);
        let mut small = vec![Matrix::row_vector(&[0.1])];
        clip_gradients(&mut small, &[true], 1.0);
        assert_eq!(small[0].get(0, 0), 0.1);
    }
}

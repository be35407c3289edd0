//! Nesterov-accelerated Adam (Nadam) over flat parameter vectors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NadamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl NadamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected Nadam update with a constant momentum coefficient:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
    /// m̄ = (1−β₁)·g/(1−β₁ᵗ) + β₁·m/(1−β₁ᵗ⁺¹)
    /// θ ← θ − η·m̄ / (√(v/(1−β₂ᵗ)) + ε)
    /// ```
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let grad_corr = 1.0 / (1.0 - b1.powi(t));
        let mom_corr = 1.0 / (1.0 - b1.powi(t + 1));
        let var_corr = 1.0 / (1.0 - b2.powi(t));
        let lr = self.learning_rate;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_bar = (1.0 - b1) * g * grad_corr + b1 * *m * mom_corr;
            *p -= lr * m_bar / ((*v * var_corr).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

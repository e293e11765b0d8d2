//! AdamW with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update. `step` is the 1-based count used for bias correction.
    pub fn update(&self, params: &mut ParamSet, grads: &[Array2<f64>], moments: &mut Moments, step: u64) {
        assert_eq!(grads.len(), params.len(), "one gradient per tensor");
        let bc1 = 1.0 - self.beta1.powf(step as f64);
        let bc2 = 1.0 - self.beta2.powf(step as f64);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, grad) in grads.iter().enumerate() {
            let w = params.get_mut(i);
            Zip::from(w)
                .and(grad)
                .and(&mut moments.first[i])
                .and(&mut moments.second[i])
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * self.weight_decay * *w;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl Moments {
    pub fn zeros(params: &ParamSet) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        self.first.len() == params.len()
            && self.second.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(p, (m, v))| p.dim() == m.dim() && p.dim() == v.dim())
    }
}

pub fn grad_norm(grads: &[&[Array2<f64>]]) -> f64 {
    grads
        .iter()
        .flat_map(|set| set.iter())
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Vec<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|set| set.iter())
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for set in grads.iter_mut() {
            for t in set.iter_mut() {
                t.mapv_inplace(|g| g * s);
            }
        }
    }
    norm
}

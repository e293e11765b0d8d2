//! Noise schedule tables and the closed-form diffusion maps.
//!
//! Timesteps are 0-indexed: `t` in `[0, T)`. The DDIM step treats a missing
//! previous timestep as the clean boundary where `alpha_bar = 1`, so the last
//! step of a plan returns the clean-feature estimate itself.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        let ok = beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !ok || !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * (i as f64) / span)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.last().is_some_and(|ab| *ab <= 0.0) {
            return Err(Error::Schedule("alpha_bar underflows to zero".into()));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Schedule(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `alpha_bar` at `t`, with `None` meaning the clean boundary (1.0).
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    /// Coefficients `(sqrt(ab), sqrt(1 - ab))` mixing signal and noise at `t`.
    pub fn mix_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(1/sqrt(ab), sqrt(1/ab - 1))` of the clean-feature estimate.
    pub fn inversion_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (1.0 / ab.sqrt(), (1.0 / ab - 1.0).sqrt())
    }

    pub fn forward_diffuse(
        &self,
        x0: ArrayView1<f64>,
        eps: ArrayView1<f64>,
        t: usize,
    ) -> Result<Array1<f64>> {
        self.check_t(t)?;
        same_len(x0.len(), eps.len(), "noise")?;
        let (a, b) = self.mix_coefficients(t);
        Ok(forward_with(x0, eps, a, b))
    }

    pub fn estimate_x0(
        &self,
        x_t: ArrayView1<f64>,
        eps_hat: ArrayView1<f64>,
        t: usize,
    ) -> Result<Array1<f64>> {
        self.check_t(t)?;
        same_len(x_t.len(), eps_hat.len(), "predicted noise")?;
        if self.alpha_bar[t] <= 0.0 {
            return Err(Error::Singular { t });
        }
        let (a, b) = self.inversion_coefficients(t);
        Ok(estimate_with(x_t, eps_hat, a, b))
    }

    /// Deterministic (eta = 0) DDIM transition from `t` to `t_prev`.
    pub fn ddim_step(
        &self,
        x_t: ArrayView1<f64>,
        eps_hat: ArrayView1<f64>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Array1<f64>> {
        if let Some(tp) = t_prev {
            if tp >= t {
                return Err(Error::Ordering { t, t_prev: tp });
            }
        }
        let x0 = self.estimate_x0(x_t, eps_hat, t)?;
        let ab_prev = self.alpha_bar_at(t_prev);
        Ok(ddim_with(x0.view(), eps_hat, ab_prev))
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what} has length {b}, feature has length {a}"
        )));
    }
    Ok(())
}

/// `a * x0 + b * eps`.
pub fn forward_with(x0: ArrayView1<f64>, eps: ArrayView1<f64>, a: f64, b: f64) -> Array1<f64> {
    Zip::from(&x0).and(&eps).map_collect(|x, e| a * x + b * e)
}

/// `a * x_t - b * eps_hat`.
pub fn estimate_with(x_t: ArrayView1<f64>, eps_hat: ArrayView1<f64>, a: f64, b: f64) -> Array1<f64> {
    Zip::from(&x_t)
        .and(&eps_hat)
        .map_collect(|x, e| a * x - b * e)
}

/// Re-noise a clean estimate to level `ab_prev` along the predicted noise.
pub fn ddim_with(x0_hat: ArrayView1<f64>, eps_hat: ArrayView1<f64>, ab_prev: f64) -> Array1<f64> {
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Zip::from(&x0_hat)
        .and(&eps_hat)
        .map_collect(|x, e| a * x + b * e)
}

/// Ascending, uniformly strided timestep subsequence ending at `T - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdimPlan {
    steps: Vec<usize>,
}

impl DdimPlan {
    /// `steps[i] = T - 1 - (count - 1 - i) * (T / count)`.
    pub fn new(sched: &NoiseSchedule, count: usize) -> Result<Self> {
        let total = sched.steps();
        if count == 0 || count > total {
            return Err(Error::Plan(format!(
                "step count {count} must be in [1, {total}]"
            )));
        }
        let stride = total / count;
        let steps = (0..count)
            .map(|i| total - 1 - (count - 1 - i) * stride)
            .collect();
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    /// Check the plan indexes into `sched`.
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        match self.steps.last() {
            Some(&last) if last + 1 == sched.steps() => Ok(()),
            _ => Err(Error::Plan(format!(
                "plan does not end at T-1 for a schedule of {} steps",
                sched.steps()
            ))),
        }
    }

    /// `(t, t_prev)` pairs in sampling (descending) order.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        (0..self.steps.len())
            .rev()
            .map(|k| (self.steps[k], k.checked_sub(1).map(|j| self.steps[j])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sched_with_alpha_bar(ab: &[f64]) -> NoiseSchedule {
        // Reverse the cumulative product so the table hits the given alpha_bar values.
        let mut beta = Vec::new();
        let mut prev = 1.0;
        for &a in ab {
            beta.push(1.0 - a / prev);
            prev = a;
        }
        NoiseSchedule::from_betas(beta).unwrap()
    }

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bar, vec![0.9999]);
    }

    #[test]
    fn default_start_value() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert!((s.beta[999] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[999] > 0.0 && s.alpha_bar[0] < 1.0);
        for t in 1..1000 {
            assert_eq!(s.alpha_bar[t], s.alpha_bar[t - 1] * s.alpha[t]);
        }
    }

    #[test]
    fn forward_scalar_case() {
        let s = sched_with_alpha_bar(&[0.64]);
        let out = s.forward_diffuse(array![2.0].view(), array![-1.0].view(), 0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_boundaries() {
        let x0 = array![0.3, -1.2];
        let eps = array![1.5, 0.5];
        let clean = forward_with(x0.view(), eps.view(), 1.0, 0.0);
        assert_eq!(clean, x0);
        let noise = forward_with(x0.view(), eps.view(), 0.0, 1.0);
        assert_eq!(noise, eps);
    }

    #[test]
    fn forward_shape_error() {
        let s = sched_with_alpha_bar(&[0.5]);
        let err = s.forward_diffuse(array![1.0, 2.0].view(), array![1.0].view(), 0);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn estimate_scalar_case() {
        let s = sched_with_alpha_bar(&[0.64]);
        let out = s.estimate_x0(array![1.0].view(), array![-1.0].view(), 0).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12);
        let zero = s.estimate_x0(array![1.0].view(), array![0.0].view(), 0).unwrap();
        assert!((zero[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn ddim_scalar_case() {
        let s = sched_with_alpha_bar(&[0.81, 0.64]);
        let out = s
            .ddim_step(array![1.0].view(), array![-1.0].view(), 1, Some(0))
            .unwrap();
        let expected = 0.9 * 2.0 - 0.19f64.sqrt();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[0] - 1.364110).abs() < 1e-6);
    }

    #[test]
    fn ddim_equal_levels_is_identity() {
        let x = array![0.7, -0.2, 3.1];
        let e = array![0.1, 0.4, -2.0];
        let s = sched_with_alpha_bar(&[0.5]);
        let x0 = s.estimate_x0(x.view(), e.view(), 0).unwrap();
        let back = ddim_with(x0.view(), e.view(), 0.5);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = array![1.0];
        let err = s.ddim_step(x.view(), x.view(), 3, Some(3));
        assert!(matches!(err, Err(Error::Ordering { .. })));
    }

    #[test]
    fn plan_paper_default() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let p = DdimPlan::new(&s, 50).unwrap();
        assert_eq!(p.count(), 50);
        assert_eq!(*p.steps().last().unwrap(), 999);
        assert!(p.steps().windows(2).all(|w| w[1] - w[0] == 20));
    }

    #[test]
    fn plan_full_and_small() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let full = DdimPlan::new(&s, 10).unwrap();
        assert_eq!(full.steps(), (0..10).collect::<Vec<_>>().as_slice());
        // stride = 10 / 2 = 5; first = 9 - 5 = 4
        let two = DdimPlan::new(&s, 2).unwrap();
        assert_eq!(two.steps(), &[4, 9]);
        assert!(DdimPlan::new(&s, 11).is_err());
        assert!(DdimPlan::new(&s, 0).is_err());
    }

    #[test]
    fn transitions_end_at_clean_boundary() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let p = DdimPlan::new(&s, 2).unwrap();
        let tr: Vec<_> = p.transitions().collect();
        assert_eq!(tr, vec![(9, Some(4)), (4, None)]);
    }

    proptest! {
        #[test]
        fn inversion_identity(
            x0 in proptest::collection::vec(-5.0f64..5.0, 8),
            eps in proptest::collection::vec(-3.0f64..3.0, 8),
            t in 0usize..1000,
        ) {
            let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
            let x0 = Array1::from(x0);
            let xt = s.forward_diffuse(x0.view(), Array1::from(eps.clone()).view(), t).unwrap();
            let back = s.estimate_x0(xt.view(), Array1::from(eps).view(), t).unwrap();
            let scale = x0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in back.iter().zip(x0.iter()) {
                prop_assert!((a - b).abs() / scale < 1e-10);
            }
        }

        #[test]
        fn plans_are_well_formed(total in 1usize..400, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::linear(total, 1e-4, 2e-2).unwrap();
            let count = 1 + ((total - 1) as f64 * frac) as usize;
            let p = DdimPlan::new(&s, count).unwrap();
            prop_assert_eq!(p.count(), count);
            prop_assert_eq!(*p.steps().last().unwrap(), total - 1);
            prop_assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.validate(&s).is_ok());
        }
    }
}

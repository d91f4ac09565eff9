//! Noise schedule, forward noising, ancestral reverse step and the denoising loss.
//!
//! Step indices are 1-based throughout the public API (`t ∈ [1, T]`); the
//! schedule arrays are stored 0-based and [`NoiseSchedule::index`] is the only
//! place that converts between the two.

use alloc::format;
use alloc::vec::Vec;

use crate::math::sqrt;
use crate::{Error, LatentTensor, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::invalid("beta_start", format!("{beta_start} is outside (0, 1)")));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid("beta_end", format!("{beta_end} is outside (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::invalid("beta_end", format!("{beta_end} is below beta_start {beta_start}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Constant => (0..steps).map(|_| beta_start).collect(),
            ScheduleKind::Linear if steps == 1 => alloc::vec![beta_start],
            ScheduleKind::Linear => {
                let span = (beta_end - beta_start) / (steps - 1) as f64;
                (0..steps).map(|i| beta_start + span * i as f64).collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::invalid("steps", "cumulative signal factor underflowed to zero"));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linear 1e-4 → 0.02 over `steps`.
    pub fn linear_default(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Linear, steps, 1e-4, 0.02)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Converts a 1-based step index into a storage offset.
    pub fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Closed-form jump `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, x0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        let ab = self.alpha_bar(t)?;
        x0.axpby(sqrt(ab), eps, sqrt(1.0 - ab))
    }

    /// One Markov step `x_t = √(1−β_t)·x_{t−1} + √β_t·z`.
    pub fn forward_step(&self, x_prev: &LatentTensor, t: usize, z: &LatentTensor) -> Result<LatentTensor> {
        let beta = self.beta(t)?;
        x_prev.axpby(sqrt(1.0 - beta), z, sqrt(beta))
    }

    /// Ancestral DDPM update with `σ_t = √β_t`. The noise term is dropped at `t = 1`.
    pub fn reverse_step(
        &self,
        xt: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
        z: &LatentTensor,
    ) -> Result<LatentTensor> {
        let i = self.index(t)?;
        xt.ensure_same_shape(eps_pred)?;
        xt.ensure_same_shape(z)?;
        if eps_pred.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: format!("reverse step t={t}"),
                reason: "noise prediction diverged".into(),
            });
        }
        let beta = self.betas[i];
        let scale = 1.0 / sqrt(1.0 - beta);
        let eps_coef = beta / sqrt(1.0 - self.alpha_bars[i]);
        let sigma = if t == 1 { 0.0 } else { sqrt(beta) };
        let data = xt
            .data()
            .iter()
            .zip(eps_pred.data())
            .zip(z.data())
            .map(|((x, e), n)| scale * (x - eps_coef * e) + sigma * n)
            .collect();
        let (c, h, w) = xt.shape();
        LatentTensor::new(c, h, w, data).map_err(|e| match e {
            Error::Numeric { reason, .. } => Error::Numeric { location: format!("reverse step t={t}"), reason },
            other => other,
        })
    }
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_pred: &LatentTensor, eps: &LatentTensor) -> Result<f64> {
    eps_pred.ensure_same_shape(eps)?;
    let n = eps.len().max(1) as f64;
    Ok(eps_pred.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> LatentTensor {
        LatentTensor::new(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn constant_schedule_products() {
        let s = NoiseSchedule::build(ScheduleKind::Constant, 2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.02, 0.02).unwrap();
        assert_eq!(s.alpha_bars(), &[0.98]);
    }

    #[test]
    fn two_step_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.979902).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let field = |r: Result<NoiseSchedule>| match r {
            Err(Error::Validation { field, .. }) => field,
            other => panic!("expected validation error, got {other:?}"),
        };
        assert_eq!(field(NoiseSchedule::build(ScheduleKind::Linear, 0, 0.1, 0.2)), "steps");
        assert_eq!(field(NoiseSchedule::build(ScheduleKind::Linear, 3, 0.0, 0.2)), "beta_start");
        assert_eq!(field(NoiseSchedule::build(ScheduleKind::Linear, 3, 0.1, 1.0)), "beta_end");
        assert_eq!(field(NoiseSchedule::build(ScheduleKind::Linear, 3, 0.3, 0.2)), "beta_end");
    }

    #[test]
    fn step_index_bounds() {
        let s = NoiseSchedule::linear_default(10).unwrap();
        assert!(matches!(s.alpha_bar(0), Err(Error::StepOutOfRange { t: 0, max: 10 })));
        assert!(matches!(s.alpha_bar(11), Err(Error::StepOutOfRange { .. })));
        assert!(s.alpha_bar(10).is_ok());
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = NoiseSchedule::build(ScheduleKind::Constant, 2, 0.1, 0.1).unwrap();
        let out = s.forward_diffuse(&scalar(1.0), 2, &scalar(1.0)).unwrap();
        assert!((out.data()[0] - (0.9 + sqrt(0.19))).abs() < 1e-12);

        let x0 = LatentTensor::new(1, 2, 2, vec![0.3, -0.2, 1.5, 0.0]).unwrap();
        let zeros = LatentTensor::zeros(1, 2, 2);
        let ab = s.alpha_bar(1).unwrap();
        let out = s.forward_diffuse(&x0, 1, &zeros).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, sqrt(ab) * x);
        }
        let out = s.forward_diffuse(&zeros, 1, &x0).unwrap();
        for (o, e) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, sqrt(1.0 - ab) * e);
        }
        assert!(s.forward_diffuse(&x0, 1, &scalar(0.0)).is_err());
        assert!(s.forward_diffuse(&x0, 3, &zeros).is_err());
    }

    #[test]
    fn forward_step_cases() {
        let s = NoiseSchedule::build(ScheduleKind::Constant, 3, 0.19, 0.19).unwrap();
        let out = s.forward_step(&scalar(1.0), 1, &scalar(1.0)).unwrap();
        assert!((out.data()[0] - (0.9 + sqrt(0.19))).abs() < 1e-12);
        let out = s.forward_step(&scalar(2.0), 2, &scalar(0.0)).unwrap();
        assert_eq!(out.data()[0], sqrt(0.81) * 2.0);
    }

    #[test]
    fn loss_cases() {
        let a = LatentTensor::new(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.3).unwrap();
        assert!((diffusion_loss(&shifted, &a).unwrap() - 0.09).abs() < 1e-12);
        assert!(diffusion_loss(&a, &scalar(1.0)).is_err());
    }

    #[test]
    fn reverse_step_cases() {
        let s = NoiseSchedule::build(ScheduleKind::Constant, 2, 0.19, 0.19).unwrap();
        // at t=1, ᾱ = 0.81, β = 0.19
        let out = s.reverse_step(&scalar(1.0), &scalar(0.5), 1, &scalar(0.0)).unwrap();
        let expected = (1.0 - (0.19 / sqrt(0.19)) * 0.5) / 0.9;
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] - 0.869).abs() < 1e-3);

        let with_noise = s.reverse_step(&scalar(1.0), &scalar(0.5), 1, &scalar(3.0)).unwrap();
        assert_eq!(with_noise, out);

        let noisy = s.reverse_step(&scalar(1.0), &scalar(0.5), 2, &scalar(3.0)).unwrap();
        assert_ne!(noisy, s.reverse_step(&scalar(1.0), &scalar(0.5), 2, &scalar(0.0)).unwrap());
    }

    #[test]
    fn reverse_step_inverts_single_step_forward() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        let x0 = LatentTensor::new(1, 1, 4, vec![0.25, -0.75, 1.0, -1.0]).unwrap();
        let eps = LatentTensor::new(1, 1, 4, vec![1.2, -0.4, 0.05, 2.2]).unwrap();
        let xt = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let back = s.reverse_step(&xt, &eps, 1, &LatentTensor::zeros(1, 1, 4)).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn reverse_step_rejects_divergence() {
        let s = NoiseSchedule::linear_default(5).unwrap();
        let bad = LatentTensor::from_raw(1, 1, 1, vec![f64::NAN]);
        assert!(matches!(
            s.reverse_step(&scalar(0.0), &bad, 3, &scalar(0.0)),
            Err(Error::Numeric { .. })
        ));
    }
}

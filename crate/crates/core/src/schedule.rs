//! Cosine noise schedule and the closed-form forward (noising) process.
//!
//! Step indices are 1-based: `t = 1..=T`. Index 0 means clean data and is
//! never a valid diffusion step.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{ensure_shape, Error, Result};

/// Offset that keeps `β_1` from vanishing.
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            offset: DEFAULT_OFFSET,
        }
    }
}

/// Precomputed `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏ α_s` tables.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        Self::cosine_with_offset(steps, DEFAULT_OFFSET)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::cosine_with_offset(cfg.steps, cfg.offset)
    }

    /// `ᾱ(t) = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, with
    /// `β_t = 1 − ᾱ(t)/ᾱ(t−1)` clipped to [`MAX_BETA`]. The stored `ᾱ_t` is
    /// the running product of the clipped `α_t`.
    pub fn cosine_with_offset(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("cosine schedule needs T >= 2, got {steps}")));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::invalid(format!("schedule offset must be positive, got {offset}")));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for t in 1..=steps {
            let cur = f(t) / f0;
            betas.push((1.0 - cur / prev).min(MAX_BETA));
            prev = cur;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t−1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// CSV dump with columns `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            writeln!(out, "{t},{},{},{}", self.beta(t), self.alpha(t), self.alpha_bar(t)).unwrap();
        }
        out
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`, elementwise.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    ensure_shape(x0.shape(), eps.shape())?;
    let (a, b) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
    let values = x0.values().iter().zip(eps.values()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), values)
}

/// Batched variant with one step index per leading-axis example.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_shape(x0.shape(), eps.shape())?;
    let batch = x0.shape().first().copied().unwrap_or(0);
    if steps.len() != batch {
        return Err(Error::invalid(format!("{} step indices for batch of {batch}", steps.len())));
    }
    let mut values = Vec::with_capacity(x0.len());
    for (b, &t) in steps.iter().enumerate() {
        schedule.check_step(t)?;
        let (a, s) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
        values.extend(x0.example(b).iter().zip(eps.example(b)).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(x0.shape().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Substream};

    #[test]
    fn rejects_tiny_schedules() {
        assert!(NoiseSchedule::cosine(1).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn two_step_schedule_is_monotone() {
        let s = NoiseSchedule::cosine(2).unwrap();
        assert_eq!(s.steps(), 2);
        assert!(s.alpha_bar(1) > s.alpha_bar(2));
    }

    #[test]
    fn invariants_hold_for_many_lengths() {
        for steps in [2, 3, 10, 50, 100, 200, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0 && b <= MAX_BETA));
            assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
            for t in 2..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            }
            assert!(s.alpha_bar(steps) < 0.01);
            if steps >= 100 {
                assert!(s.alpha_bar(1) >= 0.99);
            }
        }
    }

    #[test]
    fn zero_noise_scales_clean_data() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x0 = Tensor::new(vec![1, 3, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let eps = Tensor::zeros(vec![1, 3, 2]);
        let xt = forward_diffuse(&x0, 17, &eps, &s).unwrap();
        let k = s.alpha_bar(17).sqrt();
        for (a, b) in xt.values().iter().zip(x0.values()) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn terminal_step_is_noise_dominated() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let mut rng = stream(3, Substream::Eval);
        let eps = Tensor::new(vec![1, 3, 4], normals(&mut rng, 12)).unwrap();
        let xt = forward_diffuse(&Tensor::zeros(vec![1, 3, 4]), 200, &eps, &s).unwrap();
        for (a, b) in xt.values().iter().zip(eps.values()) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forward_diffuse_errors() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x0 = Tensor::zeros(vec![1, 3, 4]);
        assert!(matches!(
            forward_diffuse(&x0, 0, &x0, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(forward_diffuse(&x0, 11, &x0, &s).is_err());
        assert!(matches!(
            forward_diffuse(&x0, 3, &Tensor::zeros(vec![1, 3, 5]), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let csv = NoiseSchedule::cosine(5).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("5,0.999,"));
    }
}

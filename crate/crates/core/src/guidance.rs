//! Training objectives, classifier-free guidance, standard-deviation
//! rescaling, and the reverse-process sampler.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::compute::{Adam, Graph, Tensor};
use crate::denoiser::{Denoiser, StyleCondition, TextEmbedding};
use crate::error::{ensure_shape, Error, Result};
use crate::rng::{normals, Rng};
use crate::schedule::{forward_diffuse_batch, NoiseSchedule};
use crate::style::StyleBank;

/// Below this, the guided estimate is treated as constant and left unscaled.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceParams {
    /// Guiding scale: 0 is unconditional, 1 conditional, above 1 extrapolates.
    pub eta: f64,
    /// Correction scale for the standard-deviation rescale.
    pub gamma: f64,
    /// Terminal draws use covariance `I / tau`.
    pub tau: f64,
    pub steps: usize,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            eta: 1.0,
            gamma: 0.7,
            tau: 1.0,
            steps: 200,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleDiagnostics {
    pub sigma_cond: f64,
    pub sigma_cfg: f64,
    /// Multiplier actually applied to the guided estimate.
    pub applied_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub t: usize,
    pub per_example: Vec<RescaleDiagnostics>,
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean squared error between `eps` and the model's prediction at `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    model: &Denoiser,
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    y: &TextEmbedding,
    c: Option<&StyleCondition>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_diffuse_batch(x0, steps, eps, schedule)?;
    let pred = model.predict_noise(&x_t, steps, schedule, y, c)?;
    ensure_shape(eps.shape(), pred.shape())?;
    let n = eps.len() as f64;
    Ok(eps.values().iter().zip(pred.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// One minibatch: clean normalized prosody, text conditions, style references.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub y: TextEmbedding,
    pub reference: Tensor,
}

/// One joint update. The conditional loss trains the conditional denoiser and
/// the style bank; the unconditional loss trains only the unconditional
/// denoiser. Both see the same `t` and noise draws. Returns `(loss_c, loss_nc)`.
pub fn train_step(
    theta1: &mut Denoiser,
    theta2: &mut Denoiser,
    bank: &mut StyleBank,
    batch: &TrainBatch,
    optimizer: &Adam,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let b = batch.x0.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    ensure_shape(batch.x0.shape(), batch.reference.shape())?;
    let total = schedule.steps();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=total)).collect();
    let eps = Tensor::new(batch.x0.shape().to_vec(), normals(rng, batch.x0.len()))?;
    let x_t = forward_diffuse_batch(&batch.x0, &steps, &eps, schedule)?;

    let mut g = Graph::new();
    let xv = g.constant(x_t.clone());
    let yv = g.constant(batch.y.tensor().clone());
    let rv = g.constant(batch.reference.clone());
    let ev = g.constant(eps.clone());
    let (c, _) = bank.encode_graph(&mut g, rv)?;
    let pred = theta1.forward(&mut g, xv, &steps, schedule, yv, Some(c))?;
    let loss = g.mse(pred, ev)?;
    let loss_c = g.value(loss)[0];
    g.backward(loss, &mut [theta1.params_mut(), bank.params_mut()])?;

    let mut g = Graph::new();
    let xv = g.constant(x_t);
    let yv = g.constant(batch.y.tensor().clone());
    let ev = g.constant(eps);
    let pred = theta2.forward(&mut g, xv, &steps, schedule, yv, None)?;
    let loss = g.mse(pred, ev)?;
    let loss_nc = g.value(loss)[0];
    g.backward(loss, &mut [theta2.params_mut()])?;

    optimizer.step(theta1.params_mut())?;
    optimizer.step(bank.params_mut())?;
    optimizer.step(theta2.params_mut())?;
    Ok((loss_c, loss_nc))
}

/// Guided estimate `eps_nc + eta·(eps_c − eps_nc)`.
///
/// At `eta = 0` and `eta = 1` the matching input is returned bit for bit.
pub fn cfg_combine(eps_c: &Tensor, eps_nc: &Tensor, eta: f64) -> Result<Tensor> {
    ensure_shape(eps_c.shape(), eps_nc.shape())?;
    if eta == 1.0 {
        return Ok(eps_c.clone());
    }
    if eta == 0.0 {
        return Ok(eps_nc.clone());
    }
    let values = eps_nc
        .values()
        .iter()
        .zip(eps_c.values())
        .map(|(nc, c)| nc + eta * (c - nc))
        .collect();
    Tensor::new(eps_c.shape().to_vec(), values)
}

/// Pulls each example's standard deviation toward the conditional estimate's:
/// `final = gamma·combined·(σ_cond/σ_cfg) + (1 − gamma)·combined`, evaluated as
/// one multiplier `1 + gamma·(σ_cond/σ_cfg − 1)` so that `gamma = 0` and
/// `σ_cond = σ_cfg` leave `combined` bit-identical.
pub fn rescale(combined: &Tensor, eps_c: &Tensor, gamma: f64) -> Result<(Tensor, Vec<RescaleDiagnostics>)> {
    ensure_shape(combined.shape(), eps_c.shape())?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let batch = combined.shape().first().copied().unwrap_or(0);
    let mut values = Vec::with_capacity(combined.len());
    let mut diags = Vec::with_capacity(batch);
    for b in 0..batch {
        let (cfg, cond) = (combined.example(b), eps_c.example(b));
        let sigma_cond = population_std(cond);
        let sigma_cfg = population_std(cfg);
        let factor = if sigma_cfg < SIGMA_FLOOR {
            1.0
        } else {
            1.0 + gamma * (sigma_cond / sigma_cfg - 1.0)
        };
        if factor == 1.0 {
            values.extend_from_slice(cfg);
        } else {
            values.extend(cfg.iter().map(|v| v * factor));
        }
        diags.push(RescaleDiagnostics {
            sigma_cond,
            sigma_cfg,
            applied_ratio: factor,
        });
    }
    Ok((Tensor::new(combined.shape().to_vec(), values)?, diags))
}

/// Ancestral step `x_t -> x_{t−1}` with posterior variance `β̃_t`; no noise is
/// added at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    ensure_shape(x_t.shape(), eps_hat.shape())?;
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mut values: Vec<f64> = x_t
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if t > 1 {
        let sigma = schedule.posterior_variance(t).sqrt();
        for (v, z) in values.iter_mut().zip(normals(rng, x_t.len())) {
            *v += sigma * z;
        }
    }
    Tensor::new(x_t.shape().to_vec(), values)
}

/// Terminal draw from `N(0, I / tau)`.
pub fn terminal_draw(shape: Vec<usize>, tau: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let n = shape.iter().product();
    let scale = 1.0 / tau.sqrt();
    Tensor::new(shape, normals(rng, n).into_iter().map(|z| z * scale).collect())
}

/// Runs the full reverse process for a batch. See [`sample_with_diagnostics`].
#[allow(clippy::too_many_arguments)]
pub fn sample(
    theta1: &Denoiser,
    theta2: &Denoiser,
    y: &TextEmbedding,
    c: Option<&StyleCondition>,
    params: &GuidanceParams,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_with_diagnostics(theta1, theta2, y, c, params, schedule, rng).map(|(x, _)| x)
}

/// Reverse process from `x_T ~ N(0, I/tau)` down to `x_0`.
///
/// With a style condition and `eta > 0`, each step combines both denoisers
/// and rescales; `eta = 1` skips the unconditional evaluation since the
/// combination equals the conditional estimate exactly. Without a style
/// condition, or with `eta = 0`, only the unconditional denoiser runs and no
/// rescale is applied.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_diagnostics(
    theta1: &Denoiser,
    theta2: &Denoiser,
    y: &TextEmbedding,
    c: Option<&StyleCondition>,
    params: &GuidanceParams,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<StepDiagnostics>)> {
    params.validate()?;
    if params.steps != schedule.steps() {
        return Err(Error::invalid(format!(
            "guidance asks for {} steps but the schedule has {}",
            params.steps,
            schedule.steps()
        )));
    }
    if !theta1.accepts_style() || theta2.accepts_style() {
        return Err(Error::StyleMismatch("expected (conditional, unconditional) denoisers".into()));
    }
    if theta1.config() != theta2.config() {
        return Err(Error::invalid("denoiser configurations differ"));
    }
    let (b, l) = (y.batch(), y.len());
    if let Some(c) = c {
        if c.tensor().shape()[0] != b {
            return Err(Error::invalid("style batch does not match text batch"));
        }
    }
    let total = schedule.steps();
    let conditional = c.filter(|_| params.eta > 0.0);
    let mut x = terminal_draw(vec![b, crate::corpus::CHANNELS, l], params.tau, rng)?;
    let mut diagnostics = Vec::new();
    for t in (1..=total).rev() {
        let steps = vec![t; b];
        let eps = match conditional {
            None => theta2.predict_noise(&x, &steps, schedule, y, None)?,
            Some(c) => {
                let eps_c = theta1.predict_noise(&x, &steps, schedule, y, Some(c))?;
                let combined = if params.eta == 1.0 {
                    eps_c.clone()
                } else {
                    let eps_nc = theta2.predict_noise(&x, &steps, schedule, y, None)?;
                    cfg_combine(&eps_c, &eps_nc, params.eta)?
                };
                let (fin, diag) = rescale(&combined, &eps_c, params.gamma)?;
                diagnostics.push(StepDiagnostics { t, per_example: diag });
                fin
            }
        };
        x = reverse_step(&x, t, &eps, schedule, rng)?;
    }
    Ok((x, diagnostics))
}

//! Forward noising, reverse steps and the sampling loop.
//!
//! The latent space is the image itself, shifted from [0, 1] to [−1, 1].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_T: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Index(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// β linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Parameter(format!("schedule needs T >= 2, got {t_steps}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Ancestral step from `t` to `t − 1`; `noise` is ignored at `t = 0`.
pub fn ddpm_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    let coef = s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt();
    let inv = 1.0 / s.alpha[t].sqrt();
    let mean = z_t.zip_map(eps_hat, |z, e| (z - coef * e) * inv)?;
    if t == 0 {
        return Ok(mean);
    }
    let sigma = s.beta[t].sqrt();
    mean.zip_map(noise, |m, n| m + sigma * n)
}

/// Clean-signal estimate `(z_t − sqrt(1 − ᾱ_t)·eps_hat) / sqrt(ᾱ_t)`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)
}

/// Deterministic (η = 0) step from `t` to `t_prev`; `None` jumps to the
/// clean estimate.
pub fn ddim_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: Option<usize>, s: &NoiseSchedule) -> Result<Tensor> {
    let z0 = predict_z0(z_t, eps_hat, t, s)?;
    let Some(tp) = t_prev else {
        return Ok(z0);
    };
    if tp >= t {
        return Err(Error::Ordering(format!("ddim_step needs t_prev < t, got {tp} >= {t}")));
    }
    let ab = s.alpha_bar[tp];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps_hat, |z, e| a * z + b * e)
}

/// `steps` evenly spaced timesteps, descending, starting at `T − 1`.
pub fn ddim_timesteps(s: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let t_total = s.steps();
    if steps == 0 || steps > t_total {
        return Err(Error::Parameter(format!(
            "sampling steps must be in 1..={t_total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_total - 1]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((t_total - 1) as f64 * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Seeded N(0, I) starting latent.
pub fn initial_latent(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// DDIM loop from seeded Gaussian noise. `eps_model(z_t, t)` predicts the
/// noise. Returns the final latent mapped to [0, 1] and clamped.
pub fn sample_loop<F>(mut eps_model: F, shape: &[usize], s: &NoiseSchedule, steps: usize, seed: u64) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(s, steps)?;
    let mut z = initial_latent(shape, seed);
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = eps_model(&z, t)?;
        z = ddim_step(&z, &eps_hat, t, ts.get(i + 1).copied(), s)?;
    }
    Ok(latent_to_image(&z))
}

/// [0, 1] image to the [−1, 1] latent.
pub fn image_to_latent(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// [−1, 1] latent to a [0, 1] image, clamped.
pub fn latent_to_image(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

//! DDPM forward (noising) process.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear in `sqrt(β)`, as used by latent diffusion models.
    ScaledLinear,
}

#[derive(Debug, Clone)]
pub struct NoiseScheduler {
    schedule: BetaSchedule,
    alphas_cumprod: Vec<f64>,
}

impl NoiseScheduler {
    /// `num_steps` betas spaced between `beta_start` and `beta_end`; valid
    /// timesteps are `0..num_steps`.
    pub fn new(schedule: BetaSchedule, beta_start: f64, beta_end: f64, num_steps: usize) -> Self {
        assert!(num_steps >= 2, "scheduler needs at least two steps");
        let denom = (num_steps - 1) as f64;
        let betas = (0..num_steps).map(|i| {
            let f = i as f64 / denom;
            match schedule {
                BetaSchedule::Linear => beta_start + f * (beta_end - beta_start),
                BetaSchedule::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let r = a + f * (b - a);
                    r * r
                }
            }
        });
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .map(|beta| {
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self {
            schedule,
            alphas_cumprod,
        }
    }

    pub fn schedule(&self) -> BetaSchedule {
        self.schedule
    }

    pub fn max_timestep(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha_cumprod(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or(Error::Timestep {
            t,
            max: self.max_timestep(),
        })
    }

    /// Returns `(sqrt(ᾱ_t), sqrt(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let abar = self.alpha_cumprod(t)?;
        Ok((abar.sqrt(), (1.0 - abar).sqrt()))
    }

    /// `sqrt(ᾱ_t) · clean + sqrt(1 − ᾱ_t) · noise`
    pub fn noisy(&self, clean: &Array3<f64>, noise: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        if clean.dim() != noise.dim() {
            return Err(Error::InputShape(format!(
                "noise shape {:?} does not match latent {:?}",
                noise.dim(),
                clean.dim()
            )));
        }
        let (signal, sigma) = self.coefficients(t)?;
        Ok(clean * signal + noise * sigma)
    }
}

/// Standard-normal array drawn from a seeded ChaCha stream.
pub fn standard_normal(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

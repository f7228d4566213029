//! Noise schedule and forward diffusion.

use crate::error::{Error, Result};
use crate::video::LatentVideo;

/// Linear variance schedule with cached cumulative alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear interpolation of betas from `beta_min` to `beta_max` over `t_count`
/// steps, with `alpha_bars[t] = prod_{i<=t} (1 - betas[i])`.
pub fn make_schedule(t_count: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 timesteps, got {t_count}"
        )));
    }
    if !beta_min.is_finite() || !beta_max.is_finite() {
        return Err(Error::Config("non-finite beta bounds".into()));
    }
    if beta_min <= 0.0 || beta_max >= 1.0 || beta_min > beta_max {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let mut betas = Vec::with_capacity(t_count);
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut prod = 1.0;
    for t in 0..t_count {
        let frac = t as f64 / (t_count - 1) as f64;
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                len: self.len(),
            })
    }

    /// Alpha-bar for a signed timestep where `-1` denotes the clean-sample
    /// boundary (`alpha_bar = 1`). Used by the DDIM update.
    pub fn alpha_bar_signed(&self, t: isize) -> Result<f64> {
        if t < 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t as usize)
        }
    }
}

/// Diffuse a clean latent to timestep `t`:
/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?}", z0.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let abar = sched.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let data = z0.data() * a + eps.data() * b;
    Ok(LatentVideo::from_array_unchecked(data))
}

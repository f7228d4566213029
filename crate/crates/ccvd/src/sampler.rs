//! Classifier-free guidance and deterministic DDIM sampling.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::video::LatentVideo;

/// Guidance and sampler settings.
///
/// `eta` is carried for completeness but pinned to zero: only the
/// deterministic DDIM trajectory is supported.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub tau: f64,
    pub steps: usize,
    pub eta: f64,
}

impl GuidanceConfig {
    pub fn new(tau: f64, steps: usize) -> Self {
        Self {
            tau,
            steps,
            eta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("cfg scale must be >= 0: {}", self.tau)));
        }
        if self.steps < 1 {
            return Err(Error::Config("sampler needs at least 1 step".into()));
        }
        if self.eta != 0.0 {
            return Err(Error::Config(format!(
                "only eta = 0 (deterministic DDIM) is supported, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::new(7.5, 50)
    }
}

/// Combine unconditional and conditional noise estimates:
/// `eps_uncond + tau * (eps_cond - eps_uncond)`.
pub fn cfg_estimate(
    eps_uncond: &LatentVideo,
    eps_cond: &LatentVideo,
    tau: f64,
) -> Result<LatentVideo> {
    eps_uncond.zip_with(eps_cond, |u, c| u + tau * (c - u))
}

/// Sub-sequence of training timesteps visited by the sampler, descending.
///
/// Trailing spacing: the first visited step is always `t_count - 1`, so a
/// single-step trajectory performs one full-range prediction.
pub fn ddim_timesteps(t_count: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_count);
    (1..=steps).rev().map(|k| k * t_count / steps - 1).collect()
}

/// One deterministic DDIM update. Returns the previous-step latent and the
/// predicted clean latent.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    abar_t: f64,
    abar_prev: f64,
) -> Result<(LatentVideo, LatentVideo)> {
    let a = abar_t.sqrt();
    let b = (1.0 - abar_t).sqrt();
    let z0 = z_t.zip_with(eps_hat, |z, e| (z - b * e) / a)?;
    let ap = abar_prev.sqrt();
    let bp = (1.0 - abar_prev).sqrt();
    let z_prev = z0.zip_with(eps_hat, |z, e| ap * z + bp * e)?;
    Ok((z_prev, z0))
}

/// Run the deterministic DDIM trajectory from `z_init` using `denoise_fn` for
/// noise estimation. `_seed` is reserved for stochastic trajectories and
/// unused while `eta` is pinned to zero.
pub fn ddim_sample<F>(
    mut denoise_fn: F,
    z_init: &LatentVideo,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    _seed: u64,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, usize) -> Result<LatentVideo>,
{
    cfg.validate()?;
    let ts = ddim_timesteps(sched.len(), cfg.steps);
    let mut z = z_init.clone();
    for (idx, &t) in ts.iter().enumerate() {
        let eps_hat = denoise_fn(&z, t)?;
        if !eps_hat.is_finite() {
            return Err(Error::NonFinite {
                step: idx,
                max_abs: eps_hat.max_abs(),
            });
        }
        let abar_t = sched.alpha_bar(t)?;
        let prev_t: isize = if idx + 1 < ts.len() {
            ts[idx + 1] as isize
        } else {
            -1
        };
        let abar_prev = sched.alpha_bar_signed(prev_t)?;
        let (z_next, _) = ddim_step(&z, &eps_hat, abar_t, abar_prev)?;
        if !z_next.is_finite() {
            return Err(Error::NonFinite {
                step: idx,
                max_abs: z_next.max_abs(),
            });
        }
        z = z_next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{forward_noise, make_schedule};

    fn rel_err(a: &LatentVideo, b: &LatentVideo) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn cfg_zero_guidance_returns_uncond() {
        let u = LatentVideo::standard_normal((2, 2, 2, 2), 1, 0);
        let c = LatentVideo::standard_normal((2, 2, 2, 2), 2, 0);
        assert_eq!(cfg_estimate(&u, &c, 0.0).unwrap(), u);
    }

    #[test]
    fn cfg_degenerate_condition_returns_uncond() {
        let u = LatentVideo::standard_normal((2, 2, 2, 2), 1, 0);
        for tau in [0.0, 1.0, 7.5, 100.0] {
            assert_eq!(cfg_estimate(&u, &u, tau).unwrap(), u);
        }
    }

    #[test]
    fn cfg_paper_scale_from_zero_uncond() {
        let u = LatentVideo::zeros((1, 2, 2, 1));
        let c = LatentVideo::standard_normal((1, 2, 2, 1), 3, 0);
        let e = cfg_estimate(&u, &c, 7.5).unwrap();
        for (x, y) in e.data().iter().zip(c.data().iter()) {
            assert_eq!(*x, 7.5 * y);
        }
    }

    #[test]
    fn timesteps_trailing_spacing() {
        assert_eq!(ddim_timesteps(100, 1), vec![99]);
        assert_eq!(ddim_timesteps(4, 4), vec![3, 2, 1, 0]);
        assert_eq!(ddim_timesteps(100, 4), vec![99, 74, 49, 24]);
        // steps above t_count clamp
        assert_eq!(ddim_timesteps(4, 9), vec![3, 2, 1, 0]);
    }

    #[test]
    fn exact_eps_single_step_inverts_forward_noise() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let z0 = LatentVideo::standard_normal((2, 4, 4, 3), 5, 0);
        let eps = LatentVideo::standard_normal((2, 4, 4, 3), 5, 1);
        let t = 99;
        let z_t = forward_noise(&z0, t, &eps, &sched).unwrap();
        let cfg = GuidanceConfig::new(0.0, 1);
        let out = ddim_sample(|_, _| Ok(eps.clone()), &z_t, &sched, &cfg, 0).unwrap();
        assert!(rel_err(&out, &z0) < 1e-6);
    }

    /// Closed form: with a denoiser that always returns the true eps, every
    /// DDIM step maps `sqrt(abar_t) z0 + sqrt(1-abar_t) eps` to the same
    /// expression at the previous timestep, so any step count lands on z0.
    #[test]
    fn one_step_equals_full_trajectory_with_exact_eps() {
        let t_count = 50;
        let sched = make_schedule(t_count, 1e-3, 0.05).unwrap();
        let z0 = LatentVideo::standard_normal((1, 4, 4, 2), 8, 0);
        let eps = LatentVideo::standard_normal((1, 4, 4, 2), 8, 1);
        let z_t = forward_noise(&z0, t_count - 1, &eps, &sched).unwrap();

        let one = ddim_sample(
            |_, _| Ok(eps.clone()),
            &z_t,
            &sched,
            &GuidanceConfig::new(0.0, 1),
            0,
        )
        .unwrap();
        let full = ddim_sample(
            |_, _| Ok(eps.clone()),
            &z_t,
            &sched,
            &GuidanceConfig::new(0.0, t_count),
            0,
        )
        .unwrap();
        assert!(rel_err(&one, &z0) < 1e-9);
        assert!(rel_err(&full, &z0) < 1e-9);
        assert!(rel_err(&one, &full) < 1e-9);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let sched = make_schedule(20, 1e-3, 0.05).unwrap();
        let z = LatentVideo::standard_normal((2, 3, 3, 2), 4, 0);
        let f = |z: &LatentVideo, t: usize| {
            z.zip_with(z, |a, _| (a * 0.9).tanh() + t as f64 * 1e-3)
        };
        let cfg = GuidanceConfig::new(0.0, 10);
        let a = ddim_sample(f, &z, &sched, &cfg, 7).unwrap();
        let b = ddim_sample(f, &z, &sched, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_estimate_aborts_with_step_index() {
        let sched = make_schedule(20, 1e-3, 0.05).unwrap();
        let z = LatentVideo::standard_normal((1, 2, 2, 1), 4, 0);
        let mut calls = 0;
        let res = ddim_sample(
            |z, _| {
                calls += 1;
                if calls == 3 {
                    let mut m = z.to_matrix();
                    m[[0, 0]] = f64::NAN;
                    Ok(LatentVideo::from_matrix(&m, z.shape()).unwrap())
                } else {
                    Ok(z.clone())
                }
            },
            &z,
            &sched,
            &GuidanceConfig::new(0.0, 10),
            0,
        );
        match res {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected NonFinite abort, got {other:?}"),
        }
    }

    #[test]
    fn validates_eta_and_steps() {
        assert!(GuidanceConfig { tau: 1.0, steps: 0, eta: 0.0 }.validate().is_err());
        assert!(GuidanceConfig { tau: 1.0, steps: 5, eta: 0.5 }.validate().is_err());
        assert!(GuidanceConfig { tau: -1.0, steps: 5, eta: 0.0 }.validate().is_err());
    }
}

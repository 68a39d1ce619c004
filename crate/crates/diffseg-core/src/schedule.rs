//! Diffusion noise schedule and closed-form forward noising of latents.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tensor::{randn_array, stream_rng};

/// Linear-beta noise schedule with precomputed running products.
///
/// Timesteps are 1-indexed: `beta(t)`, `alpha(t)` and `alpha_bar(t)` accept
/// `t` in `1..=num_steps`; `alpha_bar(0)` is additionally defined as 1.0 so
/// the clean latent fits the same closed form.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Running product ᾱ_t = Π_{k=1..t} α_k; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Checks that a timestep is usable for noising (1 ≤ t ≤ T).
    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps {
            return Err(Error::Timestep(format!(
                "timestep {t} outside valid range 1..={}",
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// Builds a schedule with betas linearly interpolated from `beta_start` to
/// `beta_end` over `t_max` steps.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    let mut alphas = Vec::with_capacity(t_max);
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut running = 1.0;
    for k in 0..t_max {
        let frac = if t_max == 1 { 0.0 } else { k as f64 / (t_max - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        let alpha = 1.0 - beta;
        running *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(running);
    }
    Ok(NoiseSchedule { num_steps: t_max, betas, alphas, alpha_bars })
}

/// A latent tensor tagged with the timestep it was noised to.
///
/// `timestep` 0 denotes the clean latent straight out of the image encoder.
#[derive(Debug, Clone)]
pub struct Latent {
    pub values: Array3<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn clean(values: Array3<f64>) -> Self {
        Latent { values, timestep: 0 }
    }
}

/// Noise input for [`noise_latent`]: either an explicit tensor or a seed
/// from which a standard-normal tensor is drawn.
pub enum NoiseSource<'a> {
    Tensor(&'a Array3<f64>),
    Seed(u64),
}

/// Forward-noises a clean latent to timestep `t`:
/// z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε.
pub fn noise_latent(
    z0: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    noise: NoiseSource<'_>,
) -> Result<Latent> {
    schedule.check_timestep(t)?;
    let eps: Array3<f64> = match noise {
        NoiseSource::Tensor(eps) => {
            if eps.dim() != z0.values.dim() {
                return Err(Error::Shape(format!(
                    "noise shape {:?} does not match latent shape {:?}",
                    eps.dim(),
                    z0.values.dim()
                )));
            }
            eps.clone()
        }
        NoiseSource::Seed(seed) => {
            let (h, w, c) = z0.values.dim();
            let mut rng = stream_rng(seed, "forward-noise");
            randn_array(&mut rng, h, w, c)
        }
    };
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let sigma = (1.0 - ab).sqrt();
    let values = &z0.values * signal + &eps * sigma;
    Ok(Latent { values, timestep: t })
}

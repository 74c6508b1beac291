//! Noise schedule, forward diffusion, training loss, classifier-free
//! guidance and deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::encoders::TextSequence;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::rng;
use crate::tensor::{no_grad, Tensor};
use crate::unet::UNet;

/// Smallest signal coefficient kept at the noisiest step. Keeping it
/// strictly positive means `ddim_step` never divides by zero on schedule
/// timesteps.
const ALPHA_MIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearAlphaBar,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ScheduleKind> {
        match s {
            "linear_alpha_bar" => Ok(ScheduleKind::LinearAlphaBar),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Per-timestep diffusion coefficients. `alpha[t]` scales the clean signal,
/// `sigma[t] = sqrt(1 - alpha[t]^2)` scales the noise; `alpha` starts at 1
/// (clean) and decreases with `t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule of `num_steps >= 2` timesteps.
    pub fn make(num_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
        if num_steps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        let alphas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let theta_max = ALPHA_MIN.acos();
                (0..num_steps)
                    .map(|t| {
                        let u = t as f64 / (num_steps - 1) as f64;
                        (u * theta_max).cos()
                    })
                    .collect()
            }
            ScheduleKind::LinearAlphaBar => {
                let abar_min = ALPHA_MIN * ALPHA_MIN;
                (0..num_steps)
                    .map(|t| {
                        let u = t as f64 / (num_steps - 1) as f64;
                        (1.0 - u * (1.0 - abar_min)).sqrt()
                    })
                    .collect()
            }
        };
        NoiseSchedule::from_alphas(alphas)
    }

    /// Build directly from signal coefficients (mostly for fixtures).
    pub fn from_alphas(alphas: Vec<f64>) -> Result<NoiseSchedule> {
        if alphas.len() < 2 {
            return Err(Error::invalid("schedule needs at least 2 steps"));
        }
        for (t, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("alpha[{t}] = {a} outside (0, 1]")));
            }
            if t > 0 && a > alphas[t - 1] {
                return Err(Error::invalid("alphas must be non-increasing"));
            }
        }
        if alphas[0] < 0.99 {
            return Err(Error::invalid(format!(
                "alpha[0] = {} is not a near-clean start",
                alphas[0]
            )));
        }
        let sigmas = alphas.iter().map(|&a| ((1.0 - a) * (1.0 + a)).sqrt()).collect();
        Ok(NoiseSchedule { num_steps: alphas.len(), alphas, sigmas })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps {
            return Err(Error::TimestepOutOfRange { t, num_steps: self.num_steps });
        }
        Ok(())
    }
}

fn check_same_shape(context: &'static str, a: &LatentVideo, b: &LatentVideo) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.dims().to_vec(),
            got: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// Noise-corrupt a clean latent: `alpha[t] * z0 + sigma[t] * eps`.
pub fn forward_diffuse(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    check_same_shape("forward_diffuse", z0, eps)?;
    schedule.check_t(t)?;
    let out = z0
        .tensor()
        .scale(schedule.alpha(t))
        .add(&eps.tensor().scale(schedule.sigma(t)));
    LatentVideo::new(out)
}

/// Mean squared error over every element; differentiable.
pub fn reconstruction_loss(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    if eps_pred.shape() != eps_true.shape() {
        return Err(Error::ShapeMismatch {
            context: "reconstruction_loss",
            expected: eps_pred.shape().to_vec(),
            got: eps_true.shape().to_vec(),
        });
    }
    let diff = eps_pred.sub(eps_true);
    Ok(diff.mul(&diff).mean_all())
}

/// Classifier-free guidance combination:
/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_predict(
    eps_cond: &LatentVideo,
    eps_uncond: &LatentVideo,
    scale: f64,
) -> Result<LatentVideo> {
    check_same_shape("cfg_predict", eps_cond, eps_uncond)?;
    if !scale.is_finite() {
        return Err(Error::invalid("cfg scale must be finite"));
    }
    let delta = eps_cond.tensor().sub(eps_uncond.tensor());
    LatentVideo::new(eps_uncond.tensor().add(&delta.scale(scale)))
}

/// One deterministic DDIM update from timestep `t` to `t_prev < t`:
/// reconstructs `x0_hat = (z_t - sigma_t * eps_hat) / alpha_t` and re-noises
/// it to the target step.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    check_same_shape("ddim_step", z_t, eps_hat)?;
    schedule.check_t(t)?;
    schedule.check_t(t_prev)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim_step requires t_prev < t, got {t_prev} >= {t}")));
    }
    let alpha_t = schedule.alpha(t);
    if alpha_t == 0.0 {
        return Err(Error::invalid(format!("alpha[{t}] = 0: invalid schedule/timestep pairing")));
    }
    let x0_hat = z_t
        .tensor()
        .add(&eps_hat.tensor().scale(-schedule.sigma(t)))
        .scale(1.0 / alpha_t);
    let out = x0_hat
        .scale(schedule.alpha(t_prev))
        .add(&eps_hat.tensor().scale(schedule.sigma(t_prev)));
    LatentVideo::new(out)
}

/// Generation settings for [`sample`].
#[derive(Debug, Clone)]
pub struct SampleParams {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub dims: [usize; 5],
}

/// Evenly spaced decreasing timestep path from the noisiest step down to 0.
pub fn timestep_path(schedule_steps: usize, num_steps: usize) -> Vec<usize> {
    let top = schedule_steps - 1;
    let mut path = Vec::with_capacity(num_steps + 1);
    for k in 0..=num_steps {
        let t = ((top * (num_steps - k)) as f64 / num_steps as f64).round() as usize;
        if path.last() != Some(&t) {
            path.push(t);
        }
    }
    path
}

/// Deterministic DDIM sampling with classifier-free guidance. The same seed
/// always produces the same latent video, including across process restarts.
pub fn sample(
    model: &UNet,
    schedule: &NoiseSchedule,
    text_cond: &TextSequence,
    null_cond: &TextSequence,
    adapters: &AdapterSet,
    appearance: Option<&crate::encoders::AppearanceEmbedding>,
    params: &SampleParams,
) -> Result<LatentVideo> {
    if params.num_steps == 0 || params.num_steps > schedule.num_steps() {
        return Err(Error::invalid(format!(
            "num_steps {} outside 1..={}",
            params.num_steps,
            schedule.num_steps()
        )));
    }
    let dims = params.dims;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("invalid latent dims {dims:?}")));
    }
    no_grad(|| {
        let mut noise_rng = rng::seeded(params.seed);
        let init = rng::normal_vec(&mut noise_rng, dims.iter().product());
        let mut z = LatentVideo::from_data(init, dims)?;
        let path = timestep_path(schedule.num_steps(), params.num_steps);
        for win in path.windows(2) {
            let (t, t_prev) = (win[0], win[1]);
            let ts = vec![t; dims[0]];
            let eps_c = model.forward(&z, &ts, text_cond, adapters, appearance)?;
            let eps_u = model.forward(&z, &ts, null_cond, adapters, appearance)?;
            let eps_hat = cfg_predict(&eps_c, &eps_u, params.guidance_scale)?;
            z = ddim_step(&z, &eps_hat, t, t_prev, schedule)?;
        }
        Ok(z)
    })
}

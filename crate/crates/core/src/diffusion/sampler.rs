use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{ddim_step, ddpm_step, NoiseSchedule};
use crate::data::{unflatten_pose, PoseSequence, POSE_DIM};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// What the denoiser is conditioned on.
#[derive(Clone, Copy, Debug)]
pub enum Condition<'a> {
    /// Per-frame music embeddings `[frames, dim]`.
    Music(&'a Tensor),
    /// The unconditional branch (learned null embedding).
    Null,
}

/// Anything that maps `(x_t, t, condition)` to a clean-motion estimate.
pub trait Denoiser: Sync {
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: Condition<'_>) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::Argument(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub method: SamplerKind,
    /// DDIM subsequence length; ignored by DDPM.
    pub steps: usize,
    pub eta: f64,
    #[serde(alias = "guidance")]
    pub guidance_scale: f64,
    /// Symmetric bound applied to every clean-motion prediction; `None` disables it.
    pub clamp: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            guidance_scale: 1.0,
            clamp: Some(1.5),
        }
    }
}

/// Uniformly spaced decreasing timesteps `T = t_k > ... > t_1 >= 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(steps >= 1 && steps <= total, Argument, "ddim steps must lie in 1..={total}, got {steps}");
    Ok((1..=steps)
        .rev()
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

fn guided(
    model: &dyn Denoiser,
    x_t: &Tensor,
    t: usize,
    music: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let cond = model.predict_x0(x_t, t, Condition::Music(music))?;
    let mut x0 = if cfg.guidance_scale == 1.0 {
        cond
    } else {
        let uncond = model.predict_x0(x_t, t, Condition::Null)?;
        let s = cfg.guidance_scale;
        uncond.zip_map(&cond, |u, c| u + s * (c - u))
    };
    if let Some(bound) = cfg.clamp {
        x0 = x0.map(|v| v.clamp(-bound, bound));
    }
    Ok(x0)
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Run the reverse process from `x_T ~ N(0, I)` and return the flattened motion `[frames, 26]`.
///
/// The frame count is taken from `music_emb.rows()`.
pub fn sample_flat(
    model: &dyn Denoiser,
    music_emb: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng_seed: u64,
) -> Result<Tensor> {
    let frames = music_emb.rows();
    ensure!(frames >= 2, Argument, "need at least 2 frames to sample, got {frames}");
    let total = sched.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = normal(&mut rng, frames, POSE_DIM);
    let check = |x: &Tensor, t: usize| -> Result<()> {
        if x.all_finite() {
            Ok(())
        } else {
            Err(Error::SamplingDiverged { timestep: t })
        }
    };
    match cfg.method {
        SamplerKind::Ddpm => {
            for t in (1..=total).rev() {
                let x0 = guided(model, &x, t, music_emb, cfg)?;
                check(&x0, t)?;
                let z = if t > 1 {
                    normal(&mut rng, frames, POSE_DIM)
                } else {
                    Tensor::zeros(frames, POSE_DIM)
                };
                x = ddpm_step(&x, t, &x0, &z, sched)?;
                check(&x, t)?;
            }
        }
        SamplerKind::Ddim => {
            let ts = ddim_timesteps(total, cfg.steps)?;
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                let x0 = guided(model, &x, t, music_emb, cfg)?;
                check(&x0, t)?;
                let z = if cfg.eta > 0.0 && t_prev > 0 {
                    normal(&mut rng, frames, POSE_DIM)
                } else {
                    Tensor::zeros(frames, POSE_DIM)
                };
                x = ddim_step(&x, t, t_prev, &x0, cfg.eta, &z, sched)?;
                check(&x, t)?;
            }
        }
    }
    Ok(x)
}

/// [`sample_flat`] unflattened into a pose sequence.
pub fn sample(
    model: &dyn Denoiser,
    music_emb: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng_seed: u64,
) -> Result<PoseSequence> {
    unflatten_pose(&sample_flat(model, music_emb, sched, cfg, rng_seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    /// Pulls every prediction towards the mean of the conditioning embedding.
    struct Toy;

    impl Denoiser for Toy {
        fn predict_x0(&self, x_t: &Tensor, _t: usize, cond: Condition<'_>) -> Result<Tensor> {
            let m = match cond {
                Condition::Music(m) => m.mean(),
                Condition::Null => 0.0,
            };
            Ok(x_t.map(|v| 0.5 * v + m))
        }
    }

    struct Exploding;

    impl Denoiser for Exploding {
        fn predict_x0(&self, x_t: &Tensor, t: usize, _c: Condition<'_>) -> Result<Tensor> {
            Ok(x_t.map(|v| if t < 500 { f64::NAN } else { v }))
        }
    }

    #[test]
    fn timesteps_are_uniform_and_decreasing() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        let all = ddim_timesteps(10, 10).unwrap();
        assert_eq!(all, (1..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn eta_zero_is_deterministic() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let m = Tensor::filled(6, 3, 0.2);
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        };
        let a = sample_flat(&Toy, &m, &s, &cfg, 4).unwrap();
        let b = sample_flat(&Toy, &m, &s, &cfg, 4).unwrap();
        assert_eq!(a, b);
        let c = sample_flat(&Toy, &m, &s, &cfg, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_guidance_skips_unconditional_branch() {
        let s = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let m = Tensor::filled(4, 2, 0.3);
        let cfg = SamplerConfig {
            steps: 5,
            eta: 0.5,
            ..SamplerConfig::default()
        };
        let guided = sample_flat(&Toy, &m, &s, &cfg, 1).unwrap();
        let strong = SamplerConfig {
            guidance_scale: 3.0,
            ..cfg.clone()
        };
        assert_ne!(guided, sample_flat(&Toy, &m, &s, &strong, 1).unwrap());
    }

    #[test]
    fn ddpm_runs_every_step() {
        let s = make_schedule(20, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let m = Tensor::filled(3, 2, 0.1);
        let cfg = SamplerConfig {
            method: SamplerKind::Ddpm,
            ..SamplerConfig::default()
        };
        let out = sample(&Toy, &m, &s, &cfg, 2).unwrap();
        assert_eq!(out.n_frames(), 3);
    }

    #[test]
    fn divergence_reports_timestep() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let m = Tensor::zeros(3, 2);
        let cfg = SamplerConfig {
            clamp: None,
            ..SamplerConfig::default()
        };
        match sample_flat(&Exploding, &m, &s, &cfg, 0) {
            Err(Error::SamplingDiverged { timestep }) => assert_eq!(timestep, 480),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

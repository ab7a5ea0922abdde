//! Forward noising process and reverse-process samplers.

mod sampler;
mod schedule;

pub use sampler::{ddim_timesteps, sample, sample_flat, Condition, Denoiser, SamplerConfig, SamplerKind};
pub use schedule::{
    ddim_coefficients, ddim_sigma, ddim_step, ddpm_coefficients, ddpm_step, make_schedule,
    predict_eps_from_x0, predict_x0_from_eps, q_sample, NoiseSchedule, ScheduleKind, StepCoefficients,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step noise coefficients for timesteps `1..=T`.
///
/// Accessors take the 1-based timestep; `alpha_bar(0)` is defined as 1 so that
/// a step to `t_prev = 0` lands on clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit betas, each strictly inside `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        ensure!(!beta.is_empty(), Argument, "schedule needs at least one step");
        ensure!(
            beta.iter().all(|&b| b > 0.0 && b < 1.0),
            Argument,
            "every beta must lie in (0, 1)"
        );
        Ok(Self::from_betas_unchecked(beta))
    }

    pub(crate) fn from_betas_unchecked(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Argument,
            "timestep {t} outside 1..={}",
            self.steps()
        );
        Ok(())
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, Argument, "schedule needs at least one step");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        Argument,
        "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
    );
    let beta = match kind {
        ScheduleKind::Linear => {
            if steps == 1 {
                vec![beta_start]
            } else {
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
    };
    NoiseSchedule::from_betas(beta)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{what}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// Closed-form forward process: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample noise shape")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Clean sample implied by `x_t` and a noise estimate.
pub fn predict_x0_from_eps(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat, "predict_x0_from_eps")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(eps_hat, |x, e| (x - b * e) / a))
}

/// Noise implied by `x_t` and a clean-sample estimate.
pub fn predict_eps_from_x0(x_t: &Tensor, t: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x_t, x0_hat, "predict_eps_from_x0")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / b))
}

/// A reverse step written as `c_x * x_t + c_eps * eps_hat + c_noise * z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub x_t: f64,
    pub eps: f64,
    pub noise: f64,
}

/// Ancestral step coefficients with the fixed variance `sigma_t^2 = beta_t`.
pub fn ddpm_coefficients(t: usize, sched: &NoiseSchedule) -> Result<StepCoefficients> {
    sched.check_t(t)?;
    let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
    Ok(StepCoefficients {
        x_t: 1.0 / alpha.sqrt(),
        eps: -beta / (alpha.sqrt() * (1.0 - ab).sqrt()),
        noise: if t == 1 { 0.0 } else { beta.sqrt() },
    })
}

/// Standard deviation of the injected noise for a DDIM step.
pub fn ddim_sigma(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> f64 {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// DDIM step coefficients expressed against `x_t` and `eps_hat`.
pub fn ddim_coefficients(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<StepCoefficients> {
    check_ddim_args(t, t_prev, eta, sched)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = ddim_sigma(t, t_prev, eta, sched);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    Ok(StepCoefficients {
        x_t: (ab_prev / ab).sqrt(),
        eps: dir - (ab_prev / ab).sqrt() * (1.0 - ab).sqrt(),
        noise: sigma,
    })
}

fn check_ddim_args(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<()> {
    sched.check_t(t)?;
    ensure!(t_prev < t, Argument, "t_prev ({t_prev}) must be smaller than t ({t})");
    ensure!((0.0..=1.0).contains(&eta), Argument, "eta must lie in [0, 1], got {eta}");
    Ok(())
}

/// One ancestral sampling step from a clean-motion prediction.
///
/// The prediction is turned into a noise estimate first; at `t == 1` the noise
/// term is dropped regardless of `z`.
pub fn ddpm_step(x_t: &Tensor, t: usize, x0_hat: &Tensor, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(t >= 1, Argument, "ddpm_step needs t >= 1");
    same_shape(x_t, z, "ddpm_step noise shape")?;
    let eps_hat = predict_eps_from_x0(x_t, t, x0_hat, sched)?;
    let c = ddpm_coefficients(t, sched)?;
    let mut out = x_t.zip_map(&eps_hat, |x, e| c.x_t * x + c.eps * e);
    if t > 1 {
        out.axpy(c.noise, z);
    }
    Ok(out)
}

/// One DDIM step from `t` to `t_prev`; with `t_prev == 0` the clean prediction is returned.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    x0_hat: &Tensor,
    eta: f64,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_ddim_args(t, t_prev, eta, sched)?;
    same_shape(x_t, z, "ddim_step noise shape")?;
    if t_prev == 0 {
        same_shape(x_t, x0_hat, "ddim_step prediction shape")?;
        return Ok(x0_hat.clone());
    }
    let eps_hat = predict_eps_from_x0(x_t, t, x0_hat, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(t, t_prev, eta, sched);
    let (a, d) = (ab_prev.sqrt(), (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let mut out = x0_hat.zip_map(&eps_hat, |x0, e| a * x0 + d * e);
    if sigma > 0.0 {
        out.axpy(sigma, z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        let s = make_schedule(1, ScheduleKind::Linear, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, ScheduleKind::Linear, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.01, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn q_sample_edges() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = rand_tensor(1, 4, 3);
        let e = rand_tensor(2, 4, 3);
        let zero = Tensor::zeros(4, 3);
        let ab = s.alpha_bar(40);
        assert_eq!(q_sample(&x0, 40, &zero, &s).unwrap(), x0.scale(ab.sqrt()));
        assert_eq!(q_sample(&zero, 40, &e, &s).unwrap(), e.scale((1.0 - ab).sqrt()));
        assert!(matches!(q_sample(&x0, 0, &e, &s), Err(crate::Error::Argument(_))));
        assert!(matches!(
            q_sample(&x0, 3, &Tensor::zeros(2, 3), &s),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn ddpm_final_step_ignores_noise() {
        let s = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let x = rand_tensor(3, 2, 2);
        let x0 = rand_tensor(4, 2, 2);
        let a = ddpm_step(&x, 1, &x0, &rand_tensor(5, 2, 2), &s).unwrap();
        let b = ddpm_step(&x, 1, &x0, &Tensor::zeros(2, 2), &s).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_step(&x, 0, &x0, &x0, &s).is_err());
    }

    #[test]
    fn ddpm_oracle_prediction_stays_on_the_forward_line() {
        let s = make_schedule(50, ScheduleKind::Linear, 1e-3, 0.05).unwrap();
        let x0 = rand_tensor(6, 3, 4);
        let e = rand_tensor(7, 3, 4);
        let t = 20;
        let x_t = q_sample(&x0, t, &e, &s).unwrap();
        let x_prev = ddpm_step(&x_t, t, &x0, &Tensor::zeros(3, 4), &s).unwrap();
        // Hand-derived: x_{t-1} = sqrt(ab_{t-1}) x0 + (alpha_t - ab_t)/(sqrt(alpha_t) sqrt(1 - ab_t)) eps.
        let (al, ab, abp) = (s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
        let c = (al - ab) / (al.sqrt() * (1.0 - ab).sqrt());
        let eps_prev = e.scale(c / (1.0 - abp).sqrt());
        let recovered = predict_x0_from_eps(&x_prev, t - 1, &eps_prev, &s).unwrap();
        assert!(recovered.sub(&x0).max_abs() < 1e-8);
    }

    #[test]
    fn ddpm_degenerate_step_is_identity() {
        let s = NoiseSchedule::from_betas_unchecked(vec![0.1, 0.0, 0.1]);
        let x = rand_tensor(8, 2, 3);
        let x0 = rand_tensor(9, 2, 3);
        let out = ddpm_step(&x, 2, &x0, &Tensor::zeros(2, 3), &s).unwrap();
        assert!(out.sub(&x).max_abs() < 1e-15);
    }

    #[test]
    fn ddim_eta_zero_ignores_noise_and_t_prev_zero_returns_prediction() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x = rand_tensor(10, 2, 3);
        let x0 = rand_tensor(11, 2, 3);
        let a = ddim_step(&x, 60, 40, &x0, 0.0, &rand_tensor(12, 2, 3), &s).unwrap();
        let b = ddim_step(&x, 60, 40, &x0, 0.0, &rand_tensor(13, 2, 3), &s).unwrap();
        assert_eq!(a, b);
        let c = ddim_step(&x, 60, 0, &x0, 0.7, &rand_tensor(13, 2, 3), &s).unwrap();
        assert_eq!(c, x0);
        assert!(ddim_step(&x, 40, 40, &x0, 0.0, &x, &s).is_err());
        assert!(ddim_step(&x, 40, 20, &x0, 1.5, &x, &s).is_err());
    }

    #[test]
    fn ddim_with_true_x0_lands_on_forward_marginal() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = rand_tensor(14, 3, 3);
        let e = rand_tensor(15, 3, 3);
        let x_t = q_sample(&x0, 70, &e, &s).unwrap();
        let eps_hat = predict_eps_from_x0(&x_t, 70, &x0, &s).unwrap();
        let out = ddim_step(&x_t, 70, 30, &x0, 0.0, &e, &s).unwrap();
        let expect = q_sample(&x0, 30, &eps_hat, &s).unwrap();
        assert!(out.sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn ddim_step_matches_its_coefficients() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x = rand_tensor(16, 2, 2);
        let x0 = rand_tensor(17, 2, 2);
        let z = rand_tensor(18, 2, 2);
        let eps = predict_eps_from_x0(&x, 50, &x0, &s).unwrap();
        let c = ddim_coefficients(50, 45, 0.6, &s).unwrap();
        let out = ddim_step(&x, 50, 45, &x0, 0.6, &z, &s).unwrap();
        let mut expect = x.scale(c.x_t);
        expect.axpy(c.eps, &eps);
        expect.axpy(c.noise, &z);
        assert!(out.sub(&expect).max_abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn parameterisations_are_inverse(seed in any::<u64>(), t in 1usize..=1000) {
            let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
            let x0 = rand_tensor(seed, 3, 5);
            let e = rand_tensor(seed.wrapping_add(1), 3, 5);
            let x_t = q_sample(&x0, t, &e, &s).unwrap();
            let eps = predict_eps_from_x0(&x_t, t, &x0, &s).unwrap();
            prop_assert!(eps.sub(&e).max_abs() < 1e-10);
            let back = predict_x0_from_eps(&x_t, t, &eps, &s).unwrap();
            prop_assert!(back.sub(&x0).max_abs() < 1e-10);
        }
    }
}

//! Variance-exploding SDE: geometric noise schedule, perturbation kernel and
//! reverse-time integrators. Nothing here knows about neural networks; scores
//! come in through [`ScoreFn`].

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normals;

/// `sigma(t) = sigma_min * (sigma_max / sigma_min)^t` on `t in [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Number of discretization points `T`.
    pub t_steps: usize,
    /// Earliest diffusion time.
    pub eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 378.0,
            t_steps: 1000,
            eps: 1e-5,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, t_steps: usize, eps: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            t_steps,
            eps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max ({}) must exceed sigma_min ({})",
                self.sigma_max, self.sigma_min
            )));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("t_steps must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma(t))
    }

    /// Unchecked `sigma(t)`.
    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    fn log_ratio_factor(&self) -> f64 {
        (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt()
    }

    /// `g(t) = sigma(t) * sqrt(2 ln(sigma_max / sigma_min))`, so that `d sigma^2 / dt = g^2`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma(t) * self.log_ratio_factor())
    }

    /// `T` evenly spaced times from 1 down to `eps`.
    pub fn discretize_times(&self) -> Vec<f64> {
        discretize(self.t_steps, self.eps)
    }
}

pub(crate) fn discretize(steps: usize, eps: f64) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let last = (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    let f = i as f64 / last;
                    (1.0 - f) + eps * f
                })
                .collect()
        }
    }
}

/// Current point of a reverse-time trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeState {
    pub x: ArrayD<f64>,
    pub t: f64,
}

/// Source of `grad_x log p_t(x)`. The leading axis of `x` is the batch axis.
pub trait ScoreFn {
    fn score(&self, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&ArrayD<f64>, f64) -> ArrayD<f64>,
{
    fn score(&self, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        Ok(self(x, t))
    }
}

pub fn gaussian_like<R: Rng>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), standard_normals(rng, n)).expect("shape matches length")
}

/// Draw `x_t ~ N(x0, sigma(t)^2 I)`; returns `(x_t, z)` with `x_t = x0 + sigma(t) z`.
pub fn marginal_perturb<R: Rng>(
    schedule: &NoiseSchedule,
    x0: &ArrayD<f64>,
    t: f64,
    rng: &mut R,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let sigma = schedule.sigma_at(t)?;
    let z = gaussian_like(x0.shape(), rng);
    let xt = x0 + &(&z * sigma);
    Ok((xt, z))
}

fn checked_score<S: ScoreFn + ?Sized>(score: &S, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
    let s = score.score(x, t)?;
    if s.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "score shape {:?} differs from state shape {:?}",
            s.shape(),
            x.shape()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t,
            msg: "score output is not finite".into(),
        });
    }
    Ok(s)
}

const TIME_TOL: f64 = 1e-12;

fn euler_step<S: ScoreFn + ?Sized, R: Rng>(
    schedule: &NoiseSchedule,
    state: &SdeState,
    dt: f64,
    score: &S,
    rng: &mut R,
    add_noise: bool,
) -> Result<SdeState> {
    if !(dt < 0.0) {
        return Err(Error::Contract(format!(
            "reverse-time step needs dt < 0, got {dt}"
        )));
    }
    if -dt > state.t - schedule.eps + TIME_TOL {
        return Err(Error::Contract(format!(
            "step {dt} from t = {} would pass eps = {}",
            state.t, schedule.eps
        )));
    }
    let g = schedule.diffusion_coeff(state.t)?;
    let s = checked_score(score, &state.x, state.t)?;
    // x' = x - g^2 s dt + g sqrt(|dt|) z   (VE drift is zero)
    let mut x = &state.x - &(&s * (g * g * dt));
    if add_noise {
        let z = gaussian_like(state.x.shape(), rng);
        x += &(&z * (g * (-dt).sqrt()));
    }
    let t = (state.t + dt).max(schedule.eps.min(state.t));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: state.t,
            msg: "state became non-finite".into(),
        });
    }
    Ok(SdeState { x, t })
}

/// One Euler–Maruyama step of the reverse-time SDE.
pub fn reverse_step_euler<S: ScoreFn + ?Sized, R: Rng>(
    schedule: &NoiseSchedule,
    state: &SdeState,
    dt: f64,
    score: &S,
    rng: &mut R,
) -> Result<SdeState> {
    euler_step(schedule, state, dt, score, rng, true)
}

/// Root-mean of per-sample L2 norms along the leading axis.
fn mean_sample_norm(a: &ArrayD<f64>) -> f64 {
    if a.ndim() == 0 {
        return a.iter().next().map_or(0.0, |v| v.abs());
    }
    let n = a.shape()[0].max(1);
    a.axis_iter(Axis(0))
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// One Langevin corrector step at fixed `t`.
///
/// Step size `alpha = 2 (snr * |z| / |s|)^2`, where both norms are per-sample L2
/// norms averaged over the batch axis. A zero score leaves the state untouched.
pub fn corrector_step_langevin<S: ScoreFn + ?Sized, R: Rng>(
    state: &SdeState,
    score: &S,
    snr: f64,
    rng: &mut R,
) -> Result<SdeState> {
    if !(snr > 0.0) {
        return Err(Error::Contract(format!("snr must be positive, got {snr}")));
    }
    let s = checked_score(score, &state.x, state.t)?;
    let s_norm = mean_sample_norm(&s);
    if s_norm == 0.0 {
        return Ok(state.clone());
    }
    let z = gaussian_like(state.x.shape(), rng);
    let z_norm = mean_sample_norm(&z);
    let alpha = 2.0 * (snr * z_norm / s_norm).powi(2);
    let x = &state.x + &(&s * alpha) + &(&z * (2.0 * alpha).sqrt());
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: state.t,
            msg: "corrector produced a non-finite state".into(),
        });
    }
    Ok(SdeState { x, t: state.t })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    PredictorCorrector,
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Overrides the schedule's `T` for sampling when set.
    pub steps: Option<usize>,
    pub snr: f64,
    pub corrector_steps: usize,
    /// Drop the noise term on the final predictor step.
    pub denoise_final: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::PredictorCorrector,
            steps: None,
            snr: 0.16,
            corrector_steps: 1,
            denoise_final: true,
        }
    }
}

/// Integrate from `N(0, sigma_max^2 I)` at `t = 1` down to `eps`.
pub fn sample<S: ScoreFn + ?Sized, R: Rng>(
    schedule: &NoiseSchedule,
    shape: &[usize],
    score: &S,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ArrayD<f64>> {
    let steps = cfg.steps.unwrap_or(schedule.t_steps);
    if steps < 2 {
        return Err(Error::Config(format!(
            "sampling needs at least 2 time points, got {steps}"
        )));
    }
    let times = discretize(steps, schedule.eps);
    let mut state = SdeState {
        x: gaussian_like(shape, rng) * schedule.sigma_max,
        t: times[0],
    };
    let wrap = |step: usize, e: Error| match e {
        Error::Integration { t, msg } => Error::Sampling {
            step,
            msg: format!("{msg} (t = {t})"),
        },
        other => other,
    };
    for i in 0..steps - 1 {
        if cfg.kind == SamplerKind::PredictorCorrector {
            for _ in 0..cfg.corrector_steps {
                state = corrector_step_langevin(&state, score, cfg.snr, rng).map_err(|e| wrap(i, e))?;
            }
        }
        let dt = times[i + 1] - times[i];
        let last = i + 2 == steps;
        state = euler_step(schedule, &state, dt, score, rng, !(last && cfg.denoise_final))
            .map_err(|e| wrap(i, e))?;
        state.t = times[i + 1];
    }
    Ok(state.x)
}

//! Noise schedule, forward noising and the DDIM reverse update.
//!
//! `alpha_bar[t]` is the cumulative product of `1 - beta` up to and including
//! `t`. A reverse step may target `None`, meaning the clean end of the chain
//! where the cumulative product is exactly 1.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ndiff::{Array, NdiffError, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("timestep {t} out of range for {len} timesteps")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("cumulative alpha is zero at timestep {0}")]
    ZeroAlphaBar(usize),
    #[error("negative direction variance {value} stepping {t} -> {t_prev:?}")]
    NegativeVariance { t: usize, t_prev: Option<usize>, value: f64 },
    #[error("target timestep {t_prev} is not below {t}")]
    NotDescending { t: usize, t_prev: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error(transparent)]
    Tape(#[from] NdiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { timesteps: 100, beta_min: 1e-4, beta_max: 0.2, eta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    eta: f64,
}

pub fn make_schedule(
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    eta: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if timesteps < 2 {
        return Err(ScheduleError::Invalid(format!("need at least 2 timesteps, got {timesteps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(ScheduleError::Invalid(format!(
            "betas must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let last = (timesteps - 1) as f64;
    let beta: Vec<f64> = (0..timesteps)
        .map(|t| beta_min + (beta_max - beta_min) * t as f64 / last)
        .collect();
    NoiseSchedule::from_betas(beta, eta)
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self, ScheduleError> {
        make_schedule(p.timesteps, p.beta_min, p.beta_max, p.eta)
    }

    pub fn from_betas(beta: Vec<f64>, eta: f64) -> Result<Self, ScheduleError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(ScheduleError::Invalid(format!("eta {eta} outside [0, 1]")));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(ScheduleError::Invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar, eta })
    }

    /// Builds a schedule directly from cumulative products. Values must lie in
    /// `[0, 1]` and be non-increasing; used to pin exact coefficients in tests.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, eta: f64) -> Result<Self, ScheduleError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(ScheduleError::Invalid(format!("eta {eta} outside [0, 1]")));
        }
        if alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a))
            || alpha_bar.windows(2).any(|w| w[1] > w[0])
        {
            return Err(ScheduleError::Invalid("alpha_bar must be non-increasing in [0, 1]".into()));
        }
        let mut prev = 1.0;
        let beta = alpha_bar
            .iter()
            .map(|&a| {
                let b = if prev > 0.0 { 1.0 - a / prev } else { 1.0 };
                prev = a;
                b
            })
            .collect();
        Ok(Self { beta, alpha_bar, eta })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self, ScheduleError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(ScheduleError::Invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(Self { eta, ..self.clone() })
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t >= self.len() {
            return Err(ScheduleError::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Cumulative product at an optional target; `None` is the clean end (1).
    pub fn alpha_bar_at(&self, t: Option<usize>) -> Result<f64, ScheduleError> {
        match t {
            Some(t) => self.alpha_bar(t),
            None => Ok(1.0),
        }
    }

    /// `sqrt(1 - alpha_bar[t])`, the factor converting noise to score space.
    pub fn noise_scale(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// DDIM stochasticity coefficient for the jump `t -> t_prev`.
    pub fn sigma(&self, t: usize, t_prev: Option<usize>) -> Result<f64, ScheduleError> {
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_at(t_prev)?;
        if self.eta == 0.0 || a_t >= 1.0 || a_prev <= 0.0 {
            return Ok(0.0);
        }
        let var = ((1.0 - a_prev) / (1.0 - a_t)) * (1.0 - a_t / a_prev);
        Ok(self.eta * var.max(0.0).sqrt())
    }

    /// `count` timesteps spaced uniformly over `[0, T)`, highest first; the
    /// first entry is always `T - 1` and the last `0`.
    pub fn strided_timesteps(&self, count: usize) -> Vec<usize> {
        let last = self.len() - 1;
        if count <= 1 {
            return vec![last];
        }
        let count = count.min(self.len());
        let mut ts: Vec<usize> = (0..count)
            .map(|i| ((i as f64) * last as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), ScheduleError> {
    if a.len() != b.len() {
        return Err(ScheduleError::Dimension(a.len(), b.len()));
    }
    Ok(())
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, ScheduleError> {
    check_dims(x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// One-step clean estimate `(x_t - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn predict_x0(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, ScheduleError> {
    check_dims(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(ScheduleError::ZeroAlphaBar(t));
    }
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
}

/// [`predict_x0`] recorded on a tape, for batched rows of `x_t` and `eps_hat`.
pub fn predict_x0_on_tape(
    tape: &mut Tape,
    x_t: Var,
    eps_hat: Var,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var, ScheduleError> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(ScheduleError::ZeroAlphaBar(t));
    }
    let scaled = tape.scale(eps_hat, (1.0 - ab).sqrt());
    let diff = tape.sub(x_t, scaled)?;
    Ok(tape.scale(diff, 1.0 / ab.sqrt()))
}

/// DDIM coefficients for a jump, shared by the single-point and batched forms.
#[derive(Debug, Clone, Copy)]
struct StepCoefficients {
    inv_sqrt_ab: f64,
    noise: f64,
    sqrt_ab_prev: f64,
    direction: f64,
    sigma: f64,
}

fn step_coefficients(
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<StepCoefficients, ScheduleError> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(ScheduleError::NotDescending { t, t_prev: p });
        }
    }
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(ScheduleError::ZeroAlphaBar(t));
    }
    let ab_prev = sched.alpha_bar_at(t_prev)?;
    let sigma = sched.sigma(t, t_prev)?;
    let dir_var = 1.0 - ab_prev - sigma * sigma;
    // rounding can leave a tiny negative residue when the target is the clean end
    let dir_var = if dir_var < 0.0 && dir_var > -1e-12 { 0.0 } else { dir_var };
    if dir_var < 0.0 {
        return Err(ScheduleError::NegativeVariance { t, t_prev, value: dir_var });
    }
    Ok(StepCoefficients {
        inv_sqrt_ab: 1.0 / ab.sqrt(),
        noise: (1.0 - ab).sqrt(),
        sqrt_ab_prev: ab_prev.sqrt(),
        direction: dir_var.sqrt(),
        sigma,
    })
}

impl StepCoefficients {
    fn apply(&self, x_t: &[f64], eps_hat: &[f64], fresh: Option<&[f64]>, out: &mut [f64]) {
        for j in 0..x_t.len() {
            let x0 = (x_t[j] - self.noise * eps_hat[j]) * self.inv_sqrt_ab;
            let mut v = self.sqrt_ab_prev * x0 + self.direction * eps_hat[j];
            if let Some(z) = fresh {
                v += self.sigma * z[j];
            }
            out[j] = v;
        }
    }
}

/// One DDIM update from `t` to `t_prev`. Draws `d` standard normals from `rng`
/// only when the step is stochastic (`sigma > 0`).
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>, ScheduleError> {
    check_dims(x_t, eps_hat)?;
    let c = step_coefficients(t, t_prev, sched)?;
    let fresh: Option<Vec<f64>> =
        (c.sigma > 0.0).then(|| (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect());
    let mut out = vec![0.0; x_t.len()];
    c.apply(x_t, eps_hat, fresh.as_deref(), &mut out);
    Ok(out)
}

/// Batched [`ddim_step`]: row `i` draws its noise from `rngs[i]`.
pub(crate) fn ddim_step_rows<R: Rng>(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Array, ScheduleError> {
    debug_assert_eq!(rngs.len(), x_t.rows());
    let c = step_coefficients(t, t_prev, sched)?;
    let d = x_t.cols();
    let mut out = Array::zeros(x_t.rows(), d);
    let mut fresh = vec![0.0; d];
    for (i, rng) in rngs.iter_mut().enumerate().take(x_t.rows()) {
        let noise = if c.sigma > 0.0 {
            for z in fresh.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            Some(fresh.as_slice())
        } else {
            None
        };
        c.apply(x_t.row(i), eps_hat.row(i), noise, out.row_mut(i));
    }
    Ok(out)
}

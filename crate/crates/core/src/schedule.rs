//! Variance schedule and the coefficients derived from it.
//!
//! `alphas_cum[t]` is the cumulative product `∏_{i≤t} (1 − β_i)` with `alphas_cum[0] = 1`.
//! The same quantity plays the role of both "α_t" and "ᾱ_t" in the sampling, inversion and
//! score relations throughout the crate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slack allowed when checking `σ² ≤ 1 − α_prev` so that values produced by
/// [`sigma_from_strength`] at full strength never trip the check through rounding.
const PSI_DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances `β_1..β_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alphas_cum = Vec::with_capacity(betas.len() + 1);
        let mut acc = 1.0;
        alphas_cum.push(acc);
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        Ok(Self { betas, alphas_cum })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative `α_t` for `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!(
                "timestep {t} beyond schedule length {}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive over `steps` steps.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// DDIM coefficient `ψ(α_t, α_prev, σ) = √(1/α_t − 1) − √((1 − α_prev − σ²)/α_prev)`.
pub fn psi(alpha_t: f64, alpha_prev: f64, sigma: f64) -> Result<f64> {
    if !(alpha_t > 0.0 && alpha_t <= 1.0 && alpha_prev > 0.0 && alpha_prev <= 1.0) {
        return Err(Error::Domain(format!(
            "alphas must lie in (0, 1], got {alpha_t}, {alpha_prev}"
        )));
    }
    let mut inner = 1.0 - alpha_prev - sigma * sigma;
    if inner < 0.0 {
        if inner < -PSI_DOMAIN_SLACK {
            return Err(Error::Domain(format!(
                "sigma^2 = {} exceeds 1 - alpha_prev = {}",
                sigma * sigma,
                1.0 - alpha_prev
            )));
        }
        inner = 0.0;
    }
    Ok((1.0 / alpha_t - 1.0).max(0.0).sqrt() - (inner / alpha_prev).sqrt())
}

/// Maps a noise strength `η` to the DDIM σ for the jump `t → t_prev`:
/// `σ = η·√((1−α_prev)/(1−α_t))·√(1 − α_t/α_prev)`.
pub fn sigma_from_strength(eta: f64, schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("noise strength must be >= 0, got {eta}")));
    }
    if t <= t_prev {
        return Err(Error::Domain(format!("need t > t_prev, got {t} <= {t_prev}")));
    }
    schedule.check_step(t)?;
    if eta == 0.0 {
        return Ok(0.0);
    }
    let a_t = schedule.alpha(t);
    let a_prev = schedule.alpha(t_prev);
    let var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
    Ok(eta * var.max(0.0).sqrt())
}

/// Gradient step size `s_i = √(α_t(1 − α_{i+1}))·ψ(α_{i+1}, α_i, 0)` for unit strides.
pub fn step_size_s(schedule: &NoiseSchedule, t: usize, i: usize) -> Result<f64> {
    if i >= t {
        return Err(Error::Domain(format!("need i < t, got i = {i}, t = {t}")));
    }
    step_size_between(schedule, t, i, i + 1)
}

/// Strided form of [`step_size_s`]: the step from anchor `lo` to anchor `hi`, measured at depth `t`.
pub fn step_size_between(schedule: &NoiseSchedule, t: usize, lo: usize, hi: usize) -> Result<f64> {
    schedule.check_step(t)?;
    schedule.check_step(hi)?;
    if lo >= hi {
        return Err(Error::Domain(format!("need lo < hi, got {lo} >= {hi}")));
    }
    let a_hi = schedule.alpha(hi);
    Ok((schedule.alpha(t) * (1.0 - a_hi)).sqrt() * psi(a_hi, schedule.alpha(lo), 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Towards noise (inversion).
    Forward,
    /// Towards data (generation).
    Reverse,
}

/// Strided anchors stored in traversal order: ascending for forward paths, descending for
/// reverse paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPath {
    timesteps: Vec<usize>,
    direction: Direction,
}

impl TimestepPath {
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Number of jumps along the path.
    pub fn len_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Anchors in ascending order regardless of direction.
    pub fn ascending(&self) -> Vec<usize> {
        let mut v = self.timesteps.clone();
        v.sort_unstable();
        v
    }

    /// Deepest (largest) anchor.
    pub fn deepest(&self) -> usize {
        *self.timesteps.iter().max().expect("paths are never empty")
    }

    pub fn reversed(&self) -> TimestepPath {
        let mut timesteps = self.timesteps.clone();
        timesteps.reverse();
        let direction = match self.direction {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        };
        TimestepPath { timesteps, direction }
    }
}

/// Evenly strided anchors `⌊k·T/n⌋` for `k = 0..=n`.
pub fn make_path(schedule: &NoiseSchedule, n_steps: usize, direction: Direction) -> Result<TimestepPath> {
    let total = schedule.steps();
    if n_steps == 0 || n_steps > total {
        return Err(Error::InvalidConfig(format!(
            "path step count must lie in 1..={total}, got {n_steps}"
        )));
    }
    let mut timesteps: Vec<usize> = (0..=n_steps).map(|k| k * total / n_steps).collect();
    if direction == Direction::Reverse {
        timesteps.reverse();
    }
    Ok(TimestepPath { timesteps, direction })
}

//! Numeric identity checks for the inversion and reverse-process decompositions, and the
//! per-step alignment of consecutive noise predictions.
//!
//! Notation: anchors `τ_0 < … < τ_m` with `α_k = α(τ_k)`. A trajectory state `x_k` sits at
//! `τ_k`. Step `k` (for `k = 1..=m`) joins `x_{k−1}` and `x_k` and evaluates the predictor at
//! time `τ_k`. The step size is `s_{k−1} = √(α_m(1 − α_k))·ψ(α_k, α_{k−1}, 0)`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_update, inversion_step, InversionScheme};
use crate::oracle::NoisePredictorOracle;
use crate::schedule::{make_path, psi, step_size_between, Direction};
use crate::vecops::{axpy, cosine, norm, rel_err, sub};
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Inversion,
    Reverse,
}

/// Every state of a deterministic trajectory plus the predictor values around each step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub kind: TrajectoryKind,
    pub condition: Option<ClassId>,
    /// Ascending anchors `τ_0..τ_m`.
    pub anchors: Vec<usize>,
    /// `x_k` at `τ_k`.
    pub states: Vec<Vec<f64>>,
    /// Entry `k − 1`: the ε the step actually applied.
    pub eps_used: Vec<Vec<f64>>,
    /// Entry `k − 1`: `ε(x_{k−1}, τ_k)`.
    pub eps_at_prev: Vec<Vec<f64>>,
    /// Entry `k − 1`: `ε(x_k, τ_k)`.
    pub eps_at_state: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.anchors.len() - 1
    }

    /// `δ_k = ε(x_k, τ_k) − ε(x_{k−1}, τ_k)` per step.
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.eps_at_state.iter().zip(&self.eps_at_prev).map(|(a, b)| sub(a, b)).collect()
    }

    /// `ε_used − ε(x_{k−1}, τ_k)` per step: zero for Euler inversion, `δ_k` for implicit
    /// inversion and for reverse steps.
    pub fn step_residuals(&self) -> Vec<Vec<f64>> {
        self.eps_used.iter().zip(&self.eps_at_prev).map(|(a, b)| sub(a, b)).collect()
    }

    pub fn final_state(&self) -> &[f64] {
        match self.kind {
            TrajectoryKind::Inversion => self.states.last().unwrap(),
            TrajectoryKind::Reverse => &self.states[0],
        }
    }
}

fn check_anchors(anchors: &[usize]) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("trajectory needs at least one anchor".into()));
    }
    if anchors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("anchors must be strictly ascending".into()));
    }
    Ok(())
}

/// Deterministic inversion of `x0` along ascending `anchors`.
pub fn record_inversion(
    oracle: &NoisePredictorOracle<'_>,
    x0: &[f64],
    anchors: &[usize],
    condition: Option<ClassId>,
    scheme: InversionScheme,
) -> Result<TrajectoryRecord> {
    check_anchors(anchors)?;
    oracle.world().check_dims(x0)?;
    let schedule = oracle.schedule();
    let mut rec = TrajectoryRecord {
        kind: TrajectoryKind::Inversion,
        condition,
        anchors: anchors.to_vec(),
        states: vec![x0.to_vec()],
        eps_used: Vec::new(),
        eps_at_prev: Vec::new(),
        eps_at_state: Vec::new(),
    };
    for w in anchors.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let prev = rec.states.last().unwrap().clone();
        let next = inversion_step(oracle, &prev, hi, lo, condition, scheme)?;
        let at_prev = oracle.eps(&prev, hi, condition)?;
        let at_state = oracle.eps(&next, hi, condition)?;
        // recover the ε the update applied from the update itself
        let a_hi = schedule.alpha(hi);
        let a_lo = schedule.alpha(lo);
        let coef = a_hi.sqrt() * psi(a_hi, a_lo, 0.0)?;
        let used = match scheme {
            InversionScheme::Euler => at_prev.clone(),
            InversionScheme::Implicit if coef == 0.0 => at_state.clone(),
            InversionScheme::Implicit => {
                let mut r = next.clone();
                axpy(&mut r, -(a_hi / a_lo).sqrt(), &prev);
                r.iter().map(|v| v / coef).collect()
            }
        };
        rec.eps_used.push(used);
        rec.eps_at_prev.push(at_prev);
        rec.eps_at_state.push(at_state);
        rec.states.push(next);
    }
    Ok(rec)
}

/// Deterministic (σ = 0) reverse from `x_deep` at the last anchor down to the first, with the
/// unconditional predictor or, given a condition, the conditional one (γ = 1).
pub fn record_reverse(
    oracle: &NoisePredictorOracle<'_>,
    x_deep: &[f64],
    anchors: &[usize],
    condition: Option<ClassId>,
) -> Result<TrajectoryRecord> {
    check_anchors(anchors)?;
    oracle.world().check_dims(x_deep)?;
    let m = anchors.len() - 1;
    let mut states = vec![Vec::new(); m + 1];
    states[m] = x_deep.to_vec();
    let mut used = vec![Vec::new(); m];
    for k in (1..=m).rev() {
        let eps = oracle.eps(&states[k], anchors[k], condition)?;
        states[k - 1] = ddim_update(oracle.schedule(), &states[k], anchors[k], anchors[k - 1], &eps, 0.0, None)?;
        used[k - 1] = eps;
    }
    let mut at_prev = Vec::with_capacity(m);
    for k in 1..=m {
        at_prev.push(oracle.eps(&states[k - 1], anchors[k], condition)?);
    }
    Ok(TrajectoryRecord {
        kind: TrajectoryKind::Reverse,
        condition,
        anchors: anchors.to_vec(),
        states,
        eps_at_state: used.clone(),
        eps_used: used,
        eps_at_prev: at_prev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    /// Steps of the full path; `depth` counts along it.
    pub n_steps: usize,
    pub scheme: InversionScheme,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { n_steps: 20, scheme: InversionScheme::Euler }
    }
}

fn depth_anchors(oracle: &NoisePredictorOracle<'_>, depth: usize, opts: &CheckOptions) -> Result<Vec<usize>> {
    let path = make_path(oracle.schedule(), opts.n_steps, Direction::Forward)?;
    if depth > path.len_steps() {
        return Err(Error::InvalidConfig(format!(
            "depth {depth} exceeds path length {}",
            path.len_steps()
        )));
    }
    Ok(path.timesteps()[..=depth].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionCheck {
    pub depth: usize,
    pub deepest_timestep: usize,
    /// `‖reconstruction − x_t‖ / ‖x_t‖`.
    pub residual: f64,
    /// Norm of `Σ_i s_i ∇log p(y | x_i)`.
    pub class_gradient_norm: f64,
    pub reconstruction: Vec<f64>,
    pub actual: Vec<f64>,
}

/// `Σ_i s_i·f(i)` accumulated with the time-`τ_{i+1}` marginal evaluated at `x_i`.
fn weighted_sum<F>(rec: &TrajectoryRecord, sizes: &[f64], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut acc = vec![0.0; rec.states[0].len()];
    for (i, s) in sizes.iter().enumerate() {
        axpy(&mut acc, *s, &f(i)?);
    }
    Ok(acc)
}

fn step_sizes(oracle: &NoisePredictorOracle<'_>, anchors: &[usize]) -> Result<Vec<f64>> {
    let t = *anchors.last().unwrap();
    anchors.windows(2).map(|w| step_size_between(oracle.schedule(), t, w[0], w[1])).collect()
}

/// Rebuilds the inverted point from gradients of the time marginals:
/// `√α_t·x_0 − Σ_i s_i[∇log p(x_i) + ∇log p(y | x_i)] + Σ_i s_i/√(1 − α_{i+1})·r_{i+1}`, where
/// `r` is the per-step residual of the scheme (zero for Euler). Compares it with the
/// inversion output.
pub fn verify_inversion_identity(
    oracle: &NoisePredictorOracle<'_>,
    x0: &[f64],
    y: ClassId,
    depth: usize,
    opts: &CheckOptions,
) -> Result<InversionCheck> {
    let anchors = depth_anchors(oracle, depth, opts)?;
    let rec = record_inversion(oracle, x0, &anchors, Some(y), opts.scheme)?;
    let sizes = step_sizes(oracle, &anchors)?;
    let schedule = oracle.schedule();
    let t = *anchors.last().unwrap();

    let g = weighted_sum(&rec, &sizes, |i| oracle.score_uncond(&rec.states[i], anchors[i + 1]))?;
    let h = weighted_sum(&rec, &sizes, |i| oracle.grad_log_class_posterior(&rec.states[i], anchors[i + 1], y))?;
    let residuals = rec.step_residuals();

    let mut recon: Vec<f64> = x0.iter().map(|v| schedule.alpha(t).sqrt() * v).collect();
    axpy(&mut recon, -1.0, &g);
    axpy(&mut recon, -1.0, &h);
    for (i, s) in sizes.iter().enumerate() {
        let a_next = schedule.alpha(anchors[i + 1]);
        axpy(&mut recon, s / (1.0 - a_next).sqrt(), &residuals[i]);
    }
    let actual = rec.final_state().to_vec();
    Ok(InversionCheck {
        depth,
        deepest_timestep: t,
        residual: rel_err(&recon, &actual),
        class_gradient_norm: norm(&h),
        reconstruction: recon,
        actual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseCheck {
    pub depth: usize,
    pub deepest_timestep: usize,
    /// Relative residual of the exact decomposition against the reverse output.
    pub residual: f64,
    /// Relative residual of the textbook double-sum form, which drops the drift between the
    /// inversion and reverse states; informational only.
    pub double_sum_residual: f64,
    /// Norm of `(1/√α_t)·Σ_i s_i ∇log p(y | x_i)`.
    pub first_order_norm: f64,
    pub reconstruction: Vec<f64>,
    pub actual: Vec<f64>,
}

/// Inverts `x0` toward `y`, reverses the result unconditionally with σ = 0 and rebuilds the
/// output as
/// `x_0 − (1/√α_t)Σ_i s_i ∇log p(y | x_i) + (1/√α_t)Σ_i s_i[∇log p(x̃_i) − ∇log p(x_i)]
///  + Σ_k ψ_k (r_k − r̃_k)`,
/// with `r`, `r̃` the per-step residuals of the two trajectories.
pub fn verify_erasure_decomposition(
    oracle: &NoisePredictorOracle<'_>,
    x0: &[f64],
    y: ClassId,
    depth: usize,
    opts: &CheckOptions,
) -> Result<ReverseCheck> {
    let anchors = depth_anchors(oracle, depth, opts)?;
    let inv = record_inversion(oracle, x0, &anchors, Some(y), opts.scheme)?;
    let rev = record_reverse(oracle, inv.final_state(), &anchors, None)?;
    let sizes = step_sizes(oracle, &anchors)?;
    let schedule = oracle.schedule();
    let t = *anchors.last().unwrap();
    let inv_sqrt_a = 1.0 / schedule.alpha(t).sqrt();

    let h = weighted_sum(&inv, &sizes, |i| oracle.grad_log_class_posterior(&inv.states[i], anchors[i + 1], y))?;
    let drift = weighted_sum(&inv, &sizes, |i| {
        let a = oracle.score_uncond(&rev.states[i], anchors[i + 1])?;
        let b = oracle.score_uncond(&inv.states[i], anchors[i + 1])?;
        Ok(sub(&a, &b))
    })?;
    let r = inv.step_residuals();
    let r_tilde = rev.step_residuals();

    let mut recon = x0.to_vec();
    axpy(&mut recon, -inv_sqrt_a, &h);
    axpy(&mut recon, inv_sqrt_a, &drift);
    for k in 1..anchors.len() {
        let c = psi(schedule.alpha(anchors[k]), schedule.alpha(anchors[k - 1]), 0.0)?;
        axpy(&mut recon, c, &r[k - 1]);
        axpy(&mut recon, -c, &r_tilde[k - 1]);
    }

    // printed form: Σ_{i=1}^{m−1} Σ_{j=i}^{m−1} s_i/√(α_t(1 − α_{j+1}))·[δ̃_{j+1} − δ_{j+1}]
    let d = inv.deltas();
    let d_tilde = rev.deltas();
    let mut folded = x0.to_vec();
    axpy(&mut folded, -inv_sqrt_a, &h);
    let m = anchors.len() - 1;
    for (i, s) in sizes.iter().enumerate().skip(1) {
        for j in i..m {
            let a_next = schedule.alpha(anchors[j + 1]);
            let c = s * inv_sqrt_a / (1.0 - a_next).sqrt();
            axpy(&mut folded, c, &d_tilde[j]);
            axpy(&mut folded, -c, &d[j]);
        }
    }

    let actual = rev.final_state().to_vec();
    Ok(ReverseCheck {
        depth,
        deepest_timestep: t,
        residual: rel_err(&recon, &actual),
        double_sum_residual: rel_err(&folded, &actual),
        first_order_norm: inv_sqrt_a * norm(&h),
        reconstruction: recon,
        actual,
    })
}

/// `1 − cos(ε(x_k, τ_k), ε(x_{k−1}, τ_k))` per step, ascending in time; `None` where either
/// vector has zero norm.
pub fn delta_stats(rec: &TrajectoryRecord) -> Result<Vec<Option<f64>>> {
    if rec.states.len() < 2 {
        return Err(Error::EmptySet("delta statistics need at least two states".into()));
    }
    Ok(rec
        .eps_at_state
        .iter()
        .zip(&rec.eps_at_prev)
        .map(|(a, b)| cosine(a, b).map(|c| (1.0 - c).clamp(0.0, 2.0)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrend {
    /// Sampler order: entry 0 is the step at the highest noise level.
    pub sampler_order: Vec<Option<f64>>,
    pub first: Option<f64>,
    pub last: Option<f64>,
    /// `last < first`.
    pub decays: bool,
}

/// Orders per-step values the way a sampler numbers its steps (highest noise first) and
/// flags whether the last step sits strictly below the first.
pub fn delta_trend(ascending: &[Option<f64>]) -> DeltaTrend {
    let sampler_order: Vec<Option<f64>> = ascending.iter().rev().copied().collect();
    let first = sampler_order.first().copied().flatten();
    let last = sampler_order.last().copied().flatten();
    let decays = matches!((first, last), (Some(f), Some(l)) if l < f);
    DeltaTrend { sampler_order, first, last, decays }
}

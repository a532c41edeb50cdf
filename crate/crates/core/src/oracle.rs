//! Exact noise predictors for a mixture world.
//!
//! The time-`t` marginal of an isotropic Gaussian mixture is again a mixture, so its score is
//! available in closed form. The noise predictors are defined from the scores through
//! `ε(x, t) = −√(1 − α_t)·∇log p_t(x)` (and the class-conditional analogue), which makes them the
//! ideal predictors a trained network would approximate.

use crate::schedule::NoiseSchedule;
use crate::vecops::{lincomb, log_sum_exp, scale, sub};
use crate::world::{MarginalComponent, MixtureWorld};
use crate::{ClassId, Result};

#[derive(Debug, Clone, Copy)]
pub struct NoisePredictorOracle<'a> {
    world: &'a MixtureWorld,
    schedule: &'a NoiseSchedule,
}

impl<'a> NoisePredictorOracle<'a> {
    pub fn new(world: &'a MixtureWorld, schedule: &'a NoiseSchedule) -> Self {
        Self { world, schedule }
    }

    pub fn world(&self) -> &'a MixtureWorld {
        self.world
    }

    pub fn schedule(&self) -> &'a NoiseSchedule {
        self.schedule
    }

    fn marginal(&self, t: usize, class: Option<ClassId>) -> Result<Vec<MarginalComponent>> {
        self.schedule.check_step(t)?;
        self.world.marginal_at_alpha(class, self.schedule.alpha(t))
    }

    /// `log p_t(x)` or `log p_t(x | y)`.
    pub fn log_density(&self, x: &[f64], t: usize, class: Option<ClassId>) -> Result<f64> {
        self.world.check_dims(x)?;
        let comps = self.marginal(t, class)?;
        let terms: Vec<f64> = comps.iter().map(|c| c.log_weighted_density(x)).collect();
        Ok(log_sum_exp(&terms))
    }

    /// `∇_x log p_t(x)` (or conditioned on `class`), with responsibilities in log space.
    pub fn score(&self, x: &[f64], t: usize, class: Option<ClassId>) -> Result<Vec<f64>> {
        self.world.check_dims(x)?;
        let comps = self.marginal(t, class)?;
        let logs: Vec<f64> = comps.iter().map(|c| c.log_weighted_density(x)).collect();
        let z = log_sum_exp(&logs);
        let mut out = vec![0.0; x.len()];
        for (c, l) in comps.iter().zip(&logs) {
            let r = (l - z).exp();
            if r == 0.0 {
                continue;
            }
            for ((o, xi), m) in out.iter_mut().zip(x).zip(&c.mean) {
                *o -= r * (xi - m) / c.variance;
            }
        }
        Ok(out)
    }

    pub fn score_uncond(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.score(x, t, None)
    }

    pub fn score_cond(&self, x: &[f64], t: usize, y: ClassId) -> Result<Vec<f64>> {
        self.score(x, t, Some(y))
    }

    /// `ε(x, t[, y]) = −√(1 − α_t)·score`
    pub fn eps(&self, x: &[f64], t: usize, class: Option<ClassId>) -> Result<Vec<f64>> {
        let s = self.score(x, t, class)?;
        Ok(scale(&s, -(1.0 - self.schedule.alpha(t)).sqrt()))
    }

    pub fn eps_uncond(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.eps(x, t, None)
    }

    pub fn eps_cond(&self, x: &[f64], t: usize, y: ClassId) -> Result<Vec<f64>> {
        self.eps(x, t, Some(y))
    }

    /// Classifier-free guidance `ε(x,t) + γ[ε(x,t,y) − ε(x,t)]`.
    pub fn eps_guided(&self, x: &[f64], t: usize, y: ClassId, gamma: f64) -> Result<Vec<f64>> {
        let u = self.eps_uncond(x, t)?;
        let c = self.eps_cond(x, t, y)?;
        Ok(lincomb(1.0 - gamma, &u, gamma, &c))
    }

    /// `∇_x log p_t(y | x) = ∇log p_t(x | y) − ∇log p_t(x)`.
    pub fn grad_log_class_posterior(&self, x: &[f64], t: usize, y: ClassId) -> Result<Vec<f64>> {
        let c = self.score_cond(x, t, y)?;
        let u = self.score_uncond(x, t)?;
        Ok(sub(&c, &u))
    }

    /// `log p_t(y | x)` under the time-`t` marginal.
    pub fn log_class_posterior(&self, x: &[f64], t: usize, y: ClassId) -> Result<f64> {
        let joint = self.log_density(x, t, Some(y))? + self.world.prior(y)?.ln();
        Ok(joint - self.log_density(x, t, None)?)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::schedule::build_linear_schedule;
    use crate::vecops::norm;
    use crate::world::{Component, Role};
    use crate::Error;

    fn line_world() -> MixtureWorld {
        let comps = vec![
            Component { class: ClassId(1), weight: 1.0, mean: vec![-2.0], variance: 1.0 },
            Component { class: ClassId(2), weight: 1.0, mean: vec![2.0], variance: 1.0 },
        ];
        let roles = BTreeMap::from([(ClassId(1), Role::Known), (ClassId(2), Role::Known)]);
        MixtureWorld::new(1, comps, roles, None).unwrap()
    }

    /// Schedule whose α at step 1 is exactly 0.64.
    fn schedule_064() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.36]).unwrap()
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_examples() {
        let s = schedule_064();
        let w = MixtureWorld::single_gaussian(vec![2.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        assert!((o.score_uncond(&[1.6], 1).unwrap()[0]).abs() < 1e-15);
        assert!((o.score_uncond(&[2.6], 1).unwrap()[0] + 1.0).abs() < 1e-12);
        assert!((o.eps_uncond(&[2.6], 1).unwrap()[0] - 0.6).abs() < 1e-12);
        assert_eq!(o.eps_uncond(&[2.6], 0).unwrap(), vec![0.0]);

        let lw = line_world();
        let lo = NoisePredictorOracle::new(&lw, &s);
        assert!(lo.score_uncond(&[0.0], 1).unwrap()[0].abs() < 1e-15);
        assert!(matches!(lo.score_uncond(&[0.0, 0.0], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn conditional_examples() {
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let single = MixtureWorld::single_gaussian(vec![1.0, -3.0], 0.5).unwrap();
        let o = NoisePredictorOracle::new(&single, &s);
        let x = [0.4, 0.9];
        assert_eq!(o.eps_cond(&x, 40, ClassId(1)).unwrap(), o.eps_uncond(&x, 40).unwrap());

        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let t = 60;
        let a = s.alpha(t);
        let mu = &w.components()[2].mean;
        let x = [0.3, 1.7];
        // closed-form single Gaussian: ε = √(1−α)(x − √α μ)/(α v + 1 − α)
        let want: Vec<f64> = x
            .iter()
            .zip(mu)
            .map(|(xi, m)| (1.0 - a).sqrt() * (xi - a.sqrt() * m) / (a + 1.0 - a))
            .collect();
        let got = o.eps_cond(&x, t, ClassId(3)).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-13);
        }
        let at_mean: Vec<f64> = mu.iter().map(|m| a.sqrt() * m).collect();
        assert!(norm(&o.eps_cond(&at_mean, t, ClassId(3)).unwrap()) < 1e-14);
        assert!(matches!(o.eps_cond(&x, t, ClassId(42)), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn guidance_examples() {
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let w = line_world();
        let o = NoisePredictorOracle::new(&w, &s);
        let x = [0.7];
        let y = ClassId(2);
        assert_eq!(o.eps_guided(&x, 30, y, 0.0).unwrap(), o.eps_uncond(&x, 30).unwrap());
        let g1 = o.eps_guided(&x, 30, y, 1.0).unwrap();
        assert!((g1[0] - o.eps_cond(&x, 30, y).unwrap()[0]).abs() < 1e-15);

        // independent evaluation: both predictors from explicit two-component formulas
        let a: f64 = s.alpha(30);
        let sa = a.sqrt();
        let v = a + 1.0 - a;
        let l1 = -(x[0] + 2.0 * sa).powi(2) / (2.0 * v);
        let l2 = -(x[0] - 2.0 * sa).powi(2) / (2.0 * v);
        let r2 = 1.0 / (1.0 + (l1 - l2).exp());
        let r1 = 1.0 - r2;
        let score_u = -(r1 * (x[0] + 2.0 * sa) + r2 * (x[0] - 2.0 * sa)) / v;
        let score_c = -(x[0] - 2.0 * sa) / v;
        let k = -(1.0 - a).sqrt();
        let want = k * score_u + 7.5 * (k * score_c - k * score_u);
        assert!((o.eps_guided(&x, 30, y, 7.5).unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn posterior_gradient_examples() {
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let single = MixtureWorld::single_gaussian(vec![1.0, 2.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&single, &s);
        assert!(norm(&o.grad_log_class_posterior(&[4.0, -1.0], 50, ClassId(1)).unwrap()) < 1e-15);

        let w = line_world();
        let o = NoisePredictorOracle::new(&w, &s);
        let t = 50;
        let g = o.grad_log_class_posterior(&[0.0], t, ClassId(2)).unwrap();
        let a = s.alpha(t);
        // at the midpoint: half the separation of the time-t means over the time-t variance
        let want = 0.5 * (2.0 * 2.0 * a.sqrt()) / (a + 1.0 - a);
        assert!((g[0] - want).abs() < 1e-12);
        let fd = fd_grad(|z| o.log_class_posterior(z, t, ClassId(2)).unwrap(), &[0.0], 1e-4);
        assert!(((fd[0] - g[0]) / g[0]).abs() < 1e-5);

        let deep = o.grad_log_class_posterior(&[12.0], 10, ClassId(2)).unwrap();
        assert!(norm(&deep) < 1e-6);
    }

    proptest! {
        #[test]
        fn scores_match_finite_differences(
            x0 in -8.0f64..8.0, x1 in -8.0f64..8.0, t in 0usize..=100, class in 1u32..=7,
        ) {
            let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
            let w = MixtureWorld::desk();
            let o = NoisePredictorOracle::new(&w, &s);
            let x = [x0, x1];
            for cond in [None, Some(ClassId(class))] {
                let an = o.score(&x, t, cond).unwrap();
                let fd = fd_grad(|z| o.log_density(z, t, cond).unwrap(), &x, 1e-4);
                let err = norm(&sub(&an, &fd)) / norm(&an).max(1e-3);
                prop_assert!(err < 1e-5, "err {err}");
            }
        }

        #[test]
        fn eps_is_scaled_score(x0 in -8.0f64..8.0, x1 in -8.0f64..8.0, t in 0usize..=100) {
            let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
            let w = MixtureWorld::desk();
            let o = NoisePredictorOracle::new(&w, &s);
            let x = [x0, x1];
            let e = o.eps_uncond(&x, t).unwrap();
            let sc = o.score_uncond(&x, t).unwrap();
            let k = -(1.0 - s.alpha(t)).sqrt();
            for (ei, si) in e.iter().zip(&sc) {
                prop_assert_eq!(*ei, si * k);
            }
        }

        #[test]
        fn guidance_is_affine_in_gamma(x0 in -8.0f64..8.0, gamma in 0.0f64..10.0, t in 1usize..=100) {
            let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
            let w = MixtureWorld::desk();
            let o = NoisePredictorOracle::new(&w, &s);
            let x = [x0, 1.0];
            let u = o.eps_uncond(&x, t).unwrap();
            let one = sub(&o.eps_guided(&x, t, ClassId(1), 1.0).unwrap(), &u);
            let g = sub(&o.eps_guided(&x, t, ClassId(1), gamma).unwrap(), &u);
            for (gi, oi) in g.iter().zip(&one) {
                prop_assert!((gi - gamma * oi).abs() <= 1e-10 * (1.0 + gi.abs()));
            }
        }
    }
}

//! Forward noising, DDIM reverse steps, conditional DDIM inversion and the two generation
//! pipelines that fill the pair bank.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::oracle::NoisePredictorOracle;
use crate::rng;
use crate::schedule::{make_path, psi, sigma_from_strength, Direction, NoiseSchedule};
use crate::vecops::{lincomb, norm, sq_dist};
use crate::world::{Role, TrainPoint};
use crate::{ClassId, Error, Result};

const IMPLICIT_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// DDIM anchors between data and the deepest timestep.
    pub n_steps: usize,
    /// Guidance scale of the positive pipeline.
    pub guidance_gamma: f64,
    /// Noise strength of the positive reverse process.
    pub eta_positive: f64,
    /// Noise strength of the unconditional reverse in the negative pipeline.
    pub eta_negative: f64,
    /// Number of path steps the positive pipeline noises to; the full path when unset.
    pub positive_depth: Option<usize>,
    pub rng_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            guidance_gamma: 7.5,
            eta_positive: 1.0,
            eta_negative: 0.2,
            positive_depth: None,
            rng_seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps: must be at least 1".into()));
        }
        for (name, v) in [("eta_positive", self.eta_positive), ("eta_negative", self.eta_negative)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name}: must lie in [0, 1], got {v}")));
            }
        }
        if !(self.guidance_gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance_gamma: must be >= 0, got {}",
                self.guidance_gamma
            )));
        }
        if let Some(d) = self.positive_depth {
            if d > self.n_steps {
                return Err(Error::InvalidConfig(format!(
                    "positive_depth: {d} exceeds n_steps {}",
                    self.n_steps
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }

    fn stream_key(self) -> u64 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub features: Vec<f64>,
    pub prompt_class: ClassId,
    pub polarity: Polarity,
    pub seed_id: u64,
}

/// How the inversion evaluates the noise predictor at the new point it is solving for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionScheme {
    /// Evaluate at the previous point (forward Euler); what the generation pipeline uses.
    Euler,
    /// Solve `x_t = a·x_prev + b·ε(x_t, t)` exactly by fixed-point iteration, making the step the
    /// algebraic inverse of a deterministic reverse step.
    Implicit,
}

/// `x_t = √α_t·x_0 + √(1 − α_t)·ε`
pub fn forward_noise(x0: &[f64], t: usize, epsilon: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != epsilon.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: epsilon.len() });
    }
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    Ok(lincomb(a.sqrt(), x0, (1.0 - a).sqrt(), epsilon))
}

/// One reverse update with an explicit noise estimate:
/// `x_prev = √(α_prev/α_t)·x_t − √α_prev·ψ(α_t, α_prev, σ)·ε̂ + σ·z`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    sigma: f64,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if t <= t_prev {
        return Err(Error::Domain(format!("reverse step needs t > t_prev, got {t} <= {t_prev}")));
    }
    schedule.check_step(t)?;
    let a_t = schedule.alpha(t);
    let a_prev = schedule.alpha(t_prev);
    let coef = psi(a_t, a_prev, sigma)?;
    let mut out = lincomb((a_prev / a_t).sqrt(), x_t, -a_prev.sqrt() * coef, eps_hat);
    if let Some(z) = noise {
        crate::vecops::axpy(&mut out, sigma, z);
    }
    Ok(out)
}

/// Deterministic inversion update with an explicit noise estimate:
/// `x_t = √(α_t/α_prev)·x_prev + √α_t·ψ(α_t, α_prev, 0)·ε`.
pub fn ddim_inverse_update(
    schedule: &NoiseSchedule,
    x_prev: &[f64],
    t: usize,
    t_prev: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t <= t_prev {
        return Err(Error::Domain(format!("inversion step needs t > t_prev, got {t} <= {t_prev}")));
    }
    schedule.check_step(t)?;
    let a_t = schedule.alpha(t);
    let a_prev = schedule.alpha(t_prev);
    Ok(lincomb((a_t / a_prev).sqrt(), x_prev, a_t.sqrt() * psi(a_t, a_prev, 0.0)?, eps))
}

fn draw_noise<R: Rng + ?Sized>(rng: &mut R, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One reverse step. With a condition the estimate is the guided `ε̂`; without one it is the
/// unconditional predictor. σ comes from the strength `eta`; fresh noise is drawn only when
/// σ > 0.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<R: Rng + ?Sized>(
    oracle: &NoisePredictorOracle<'_>,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    condition: Option<ClassId>,
    gamma: f64,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if t <= t_prev {
        return Err(Error::Domain(format!("reverse step needs t > t_prev, got {t} <= {t_prev}")));
    }
    let schedule = oracle.schedule();
    let eps_hat = match condition {
        Some(y) => oracle.eps_guided(x_t, t, y, gamma)?,
        None => oracle.eps_uncond(x_t, t)?,
    };
    let sigma = sigma_from_strength(eta, schedule, t, t_prev)?;
    let noise = (sigma > 0.0).then(|| draw_noise(rng, x_t.len()));
    ddim_update(schedule, x_t, t, t_prev, &eps_hat, sigma, noise.as_deref())
}

/// Conditional DDIM inversion step with the noise predictor evaluated at `x_prev` under the
/// time-`t` scaling.
pub fn cond_inversion_step(
    oracle: &NoisePredictorOracle<'_>,
    x_prev: &[f64],
    t: usize,
    t_prev: usize,
    y: ClassId,
) -> Result<Vec<f64>> {
    inversion_step(oracle, x_prev, t, t_prev, Some(y), InversionScheme::Euler)
}

/// Inversion step, conditional when `condition` is set, under the given scheme.
pub fn inversion_step(
    oracle: &NoisePredictorOracle<'_>,
    x_prev: &[f64],
    t: usize,
    t_prev: usize,
    condition: Option<ClassId>,
    scheme: InversionScheme,
) -> Result<Vec<f64>> {
    let schedule = oracle.schedule();
    let eps = oracle.eps(x_prev, t, condition)?;
    let euler = ddim_inverse_update(schedule, x_prev, t, t_prev, &eps)?;
    match scheme {
        InversionScheme::Euler => Ok(euler),
        InversionScheme::Implicit => {
            let mut x = euler;
            let mut last_diff = f64::INFINITY;
            for _ in 0..IMPLICIT_MAX_ITERS {
                let eps = oracle.eps(&x, t, condition)?;
                let next = ddim_inverse_update(schedule, x_prev, t, t_prev, &eps)?;
                let diff = sq_dist(&next, &x).sqrt();
                x = next;
                let tol = f64::EPSILON * (1.0 + norm(&x));
                if diff <= tol || (diff >= last_diff && diff < 1e3 * tol) {
                    return Ok(x);
                }
                last_diff = diff;
            }
            Err(Error::NonConvergence(IMPLICIT_MAX_ITERS))
        }
    }
}

/// Inverts `x0` along ascending `anchors`; returns the state at every anchor.
pub fn invert(
    oracle: &NoisePredictorOracle<'_>,
    x0: &[f64],
    anchors: &[usize],
    condition: Option<ClassId>,
    scheme: InversionScheme,
) -> Result<Vec<Vec<f64>>> {
    oracle.world().check_dims(x0)?;
    let mut states = vec![x0.to_vec()];
    for w in anchors.windows(2) {
        let next = inversion_step(oracle, states.last().unwrap(), w[1], w[0], condition, scheme)?;
        states.push(next);
    }
    Ok(states)
}

/// Runs reverse steps from `x_deep` at the last of the ascending `anchors` down to the first.
/// The returned states are indexed like `anchors` (index 0 is the final sample).
#[allow(clippy::too_many_arguments)]
pub fn reverse_along<R: Rng + ?Sized>(
    oracle: &NoisePredictorOracle<'_>,
    x_deep: &[f64],
    anchors: &[usize],
    condition: Option<ClassId>,
    gamma: f64,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    oracle.world().check_dims(x_deep)?;
    let n = anchors.len();
    let mut states = vec![Vec::new(); n];
    states[n - 1] = x_deep.to_vec();
    for k in (1..n).rev() {
        states[k - 1] = reverse_step(oracle, &states[k], anchors[k], anchors[k - 1], condition, gamma, eta, rng)?;
    }
    Ok(states)
}

fn check_prompt(oracle: &NoisePredictorOracle<'_>, y: ClassId) -> Result<()> {
    if oracle.world().role(y)? != Role::Known {
        return Err(Error::InvalidConfig(format!("prompt class {y} is not a known class")));
    }
    Ok(())
}

fn path_anchors(oracle: &NoisePredictorOracle<'_>, cfg: &GenerationConfig) -> Result<Vec<usize>> {
    Ok(make_path(oracle.schedule(), cfg.n_steps, Direction::Forward)?.timesteps().to_vec())
}

/// Positive pipeline: noise the seed to the configured depth, then run guided reverse steps
/// toward class `y`.
pub fn generate_positive<R: Rng + ?Sized>(
    oracle: &NoisePredictorOracle<'_>,
    seed: &TrainPoint,
    y: ClassId,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<GeneratedInstance> {
    let noise = draw_noise(rng, seed.features.len());
    generate_positive_from_noise(oracle, seed, y, &noise, cfg, rng)
}

/// [`generate_positive`] with the forward-noising draw supplied by the caller.
pub fn generate_positive_from_noise<R: Rng + ?Sized>(
    oracle: &NoisePredictorOracle<'_>,
    seed: &TrainPoint,
    y: ClassId,
    noise: &[f64],
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<GeneratedInstance> {
    cfg.validate()?;
    check_prompt(oracle, y)?;
    oracle.world().check_dims(&seed.features)?;
    let anchors = path_anchors(oracle, cfg)?;
    let depth = cfg.positive_depth.unwrap_or(cfg.n_steps);
    let anchors = &anchors[..=depth];
    let x_deep = forward_noise(&seed.features, anchors[depth], noise, oracle.schedule())?;
    let states = reverse_along(oracle, &x_deep, anchors, Some(y), cfg.guidance_gamma, cfg.eta_positive, rng)?;
    Ok(GeneratedInstance {
        features: states.into_iter().next().unwrap(),
        prompt_class: y,
        polarity: Polarity::Positive,
        seed_id: seed.id,
    })
}

/// Negative pipeline: conditional inversion toward class `y` along the full path, then an
/// unconditional reverse with strength `eta_negative`.
pub fn generate_negative<R: Rng + ?Sized>(
    oracle: &NoisePredictorOracle<'_>,
    seed: &TrainPoint,
    y: ClassId,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<GeneratedInstance> {
    cfg.validate()?;
    check_prompt(oracle, y)?;
    let anchors = path_anchors(oracle, cfg)?;
    let inverted = invert(oracle, &seed.features, &anchors, Some(y), InversionScheme::Euler)?;
    let states = reverse_along(oracle, inverted.last().unwrap(), &anchors, None, 0.0, cfg.eta_negative, rng)?;
    Ok(GeneratedInstance {
        features: states.into_iter().next().unwrap(),
        prompt_class: y,
        polarity: Polarity::Negative,
        seed_id: seed.id,
    })
}

/// Generated positive set and negative set, one instance per (seed, known class) each.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBank {
    positives: Vec<GeneratedInstance>,
    negatives: Vec<GeneratedInstance>,
    pos_index: BTreeMap<(u64, ClassId), usize>,
    neg_index: BTreeMap<(u64, ClassId), usize>,
}

impl PairBank {
    pub fn new(positives: Vec<GeneratedInstance>, negatives: Vec<GeneratedInstance>) -> Result<Self> {
        let build = |set: &[GeneratedInstance], pol: Polarity| -> Result<BTreeMap<(u64, ClassId), usize>> {
            let mut idx = BTreeMap::new();
            for (i, g) in set.iter().enumerate() {
                if g.polarity != pol {
                    return Err(Error::InvalidConfig(format!(
                        "{} set holds a {} instance",
                        pol.as_str(),
                        g.polarity.as_str()
                    )));
                }
                if idx.insert((g.seed_id, g.prompt_class), i).is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate {} instance for seed {} class {}",
                        pol.as_str(),
                        g.seed_id,
                        g.prompt_class
                    )));
                }
            }
            Ok(idx)
        };
        let pos_index = build(&positives, Polarity::Positive)?;
        let neg_index = build(&negatives, Polarity::Negative)?;
        Ok(Self { positives, negatives, pos_index, neg_index })
    }

    pub fn positives(&self) -> &[GeneratedInstance] {
        &self.positives
    }

    pub fn negatives(&self) -> &[GeneratedInstance] {
        &self.negatives
    }

    pub fn get(&self, polarity: Polarity, idx: usize) -> &GeneratedInstance {
        match polarity {
            Polarity::Positive => &self.positives[idx],
            Polarity::Negative => &self.negatives[idx],
        }
    }

    /// Index of the instance generated from `seed_id` with prompt `class`.
    pub fn find(&self, polarity: Polarity, seed_id: u64, class: ClassId) -> Option<usize> {
        match polarity {
            Polarity::Positive => self.pos_index.get(&(seed_id, class)).copied(),
            Polarity::Negative => self.neg_index.get(&(seed_id, class)).copied(),
        }
    }

    /// Writes `seed_id,prompt_class,polarity,feature_0..feature_{d-1}`; positives then negatives.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let dims = self.positives.first().map_or(0, |g| g.features.len());
        write!(out, "seed_id,prompt_class,polarity")?;
        for i in 0..dims {
            write!(out, ",feature_{i}")?;
        }
        writeln!(out)?;
        for g in self.positives.iter().chain(&self.negatives) {
            write!(out, "{},{},{}", g.seed_id, g.prompt_class, g.polarity.as_str())?;
            for v in &g.features {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("pair bank: empty file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[..3] != ["seed_id", "prompt_class", "polarity"] {
            return Err(Error::Parse(format!("pair bank: unexpected header {header:?}")));
        }
        let dims = cols.len() - 3;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("pair bank line {}: {what}", lineno + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != dims + 3 {
                return Err(bad("wrong column count"));
            }
            let seed_id = f[0].parse().map_err(|_| bad("seed_id"))?;
            let prompt_class = ClassId(f[1].parse().map_err(|_| bad("prompt_class"))?);
            let polarity = match f[2] {
                "positive" => Polarity::Positive,
                "negative" => Polarity::Negative,
                _ => return Err(bad("polarity")),
            };
            let features = f[3..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<Vec<_>>>()?;
            let g = GeneratedInstance { features, prompt_class, polarity, seed_id };
            match polarity {
                Polarity::Positive => positives.push(g),
                Polarity::Negative => negatives.push(g),
            }
        }
        Self::new(positives, negatives)
    }
}

/// Runs both pipelines for every seed and every known class. Each task draws from its own RNG
/// stream keyed by `(seed_id, class, polarity)`, so the bank is identical for any worker count.
pub fn generate_pair_bank(
    oracle: &NoisePredictorOracle<'_>,
    seeds: &[TrainPoint],
    cfg: &GenerationConfig,
) -> Result<PairBank> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::EmptySet("pair bank needs at least one training sample".into()));
    }
    let known = oracle.world().known_classes();
    let per_seed: Vec<Vec<(GeneratedInstance, GeneratedInstance)>> = seeds
        .par_iter()
        .map(|seed| {
            known
                .iter()
                .map(|&y| {
                    let key = |p: Polarity| [seed.id, u64::from(y.0), p.stream_key()];
                    let mut pos_rng = rng::stream(cfg.rng_seed, &key(Polarity::Positive));
                    let mut neg_rng = rng::stream(cfg.rng_seed, &key(Polarity::Negative));
                    Ok((
                        generate_positive(oracle, seed, y, cfg, &mut pos_rng)?,
                        generate_negative(oracle, seed, y, cfg, &mut neg_rng)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (positives, negatives) = per_seed.into_iter().flatten().unzip();
    PairBank::new(positives, negatives)
}

/// [`generate_pair_bank`] on a dedicated pool of `workers` threads.
pub fn generate_pair_bank_with_workers(
    oracle: &NoisePredictorOracle<'_>,
    seeds: &[TrainPoint],
    cfg: &GenerationConfig,
    workers: usize,
) -> Result<PairBank> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("workers: {e}")))?;
    pool.install(|| generate_pair_bank(oracle, seeds, cfg))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::schedule::build_linear_schedule;
    use crate::vecops::rel_err;
    use crate::world::MixtureWorld;

    fn default_schedule() -> NoiseSchedule {
        build_linear_schedule(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_noise_examples() {
        let s = default_schedule();
        let x = [1.5, -2.0];
        assert_eq!(forward_noise(&x, 0, &[0.3, 0.3], &s).unwrap(), x.to_vec());
        let shrink = forward_noise(&x, 40, &[0.0, 0.0], &s).unwrap();
        assert!((shrink[0] - s.alpha(40).sqrt() * 1.5).abs() < 1e-15);

        let s81 = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let v = forward_noise(&[1.0], 1, &[1.0], &s81).unwrap();
        assert!((v[0] - (0.9 + 0.19f64.sqrt())).abs() < 1e-15);
        assert!((v[0] - 1.33589).abs() < 1e-5);
        assert!(forward_noise(&[1.0], 1, &[1.0, 2.0], &s81).is_err());
    }

    #[test]
    fn deterministic_reverse_matches_scalar_recomputation() {
        let s = default_schedule();
        let w = MixtureWorld::single_gaussian(vec![1.5], 0.5).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, tp) = (60, 55);
        let x = [0.8];
        let got = reverse_step(&o, &x, t, tp, None, 0.0, 0.0, &mut rng).unwrap();

        let a = s.alpha(t);
        let ap = s.alpha(tp);
        let var_t = a * 0.5 + 1.0 - a;
        let eps = (1.0 - a).sqrt() * (x[0] - a.sqrt() * 1.5) / var_t;
        let psi_v = (1.0 / a - 1.0).sqrt() - ((1.0 - ap) / ap).sqrt();
        let want = (ap / a).sqrt() * x[0] - ap.sqrt() * psi_v * eps;
        assert!((got[0] - want).abs() < 1e-14);
    }

    #[test]
    fn reverse_at_mean_is_pure_rescale() {
        let s = default_schedule();
        let w = MixtureWorld::single_gaussian(vec![2.0, -1.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, tp) = (80, 75);
        let x: Vec<f64> = [2.0, -1.0].iter().map(|m| s.alpha(t).sqrt() * m).collect();
        let got = reverse_step(&o, &x, t, tp, Some(ClassId(1)), 3.0, 0.0, &mut rng).unwrap();
        let k = (s.alpha(tp) / s.alpha(t)).sqrt();
        for (g, xi) in got.iter().zip(&x) {
            assert!((g - k * xi).abs() < 1e-14);
        }
        assert!(reverse_step(&o, &x, 10, 10, None, 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn unguided_reverse_is_the_unconditional_update() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0, 2.0];
        let a = reverse_step(&o, &x, 50, 45, Some(ClassId(1)), 0.0, 0.0, &mut rng).unwrap();
        let b = reverse_step(&o, &x, 50, 45, None, 7.5, 0.0, &mut rng).unwrap();
        let eps = o.eps_uncond(&x, 50).unwrap();
        let c = ddim_update(&s, &x, 50, 45, &eps, 0.0, None).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, c);
    }

    #[test]
    fn inversion_undoes_reverse_at_fixed_eps() {
        let s = default_schedule();
        let x_prev = [0.7, -1.3];
        let eps = [0.25, 0.9];
        for (t, tp) in [(5, 0), (50, 45), (100, 95), (100, 0)] {
            let x_t = ddim_inverse_update(&s, &x_prev, t, tp, &eps).unwrap();
            let back = ddim_update(&s, &x_t, t, tp, &eps, 0.0, None).unwrap();
            assert!(rel_err(&back, &x_prev) < 1e-14, "{t}->{tp}");
        }
    }

    #[test]
    fn inversion_step_examples() {
        let s = default_schedule();
        let w = MixtureWorld::single_gaussian(vec![3.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        let (t, tp) = (25, 20);
        let got = cond_inversion_step(&o, &[3.0], t, tp, ClassId(1)).unwrap();
        let a = s.alpha(t);
        let ap = s.alpha(tp);
        let eps = (1.0 - a).sqrt() * (3.0 - a.sqrt() * 3.0);
        let psi_v = (1.0 / a - 1.0).sqrt() - (1.0 / ap - 1.0).sqrt();
        let want = (a / ap).sqrt() * 3.0 + a.sqrt() * psi_v * eps;
        assert!((got[0] - want).abs() < 1e-14);
        assert!(matches!(cond_inversion_step(&o, &[3.0], t, tp, ClassId(5)), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn flat_segment_inversion_is_identity() {
        // β = 1e-300 makes α_2 equal α_1 in floating point
        let s = NoiseSchedule::from_betas(vec![0.1, 1e-300]).unwrap();
        assert_eq!(s.alpha(1), s.alpha(2));
        let w = MixtureWorld::single_gaussian(vec![1.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        assert_eq!(cond_inversion_step(&o, &[0.4], 2, 1, ClassId(1)).unwrap(), vec![0.4]);
    }

    #[test]
    fn implicit_inversion_is_exact_inverse_of_deterministic_reverse() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let x_prev = [5.1, 0.4];
        let x_t = inversion_step(&o, &x_prev, 60, 55, Some(ClassId(1)), InversionScheme::Implicit).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let back = reverse_step(&o, &x_t, 60, 55, Some(ClassId(1)), 1.0, 0.0, &mut rng).unwrap();
        assert!(rel_err(&back, &x_prev) < 1e-13);
    }

    #[test]
    fn zero_depth_positive_returns_seed() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let cfg = GenerationConfig { positive_depth: Some(0), ..Default::default() };
        let seed = TrainPoint { id: 3, features: vec![1.0, -4.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generate_positive(&o, &seed, ClassId(2), &cfg, &mut rng).unwrap();
        assert_eq!(g.features, seed.features);
        assert_eq!(g.polarity, Polarity::Positive);
        assert_eq!(g.prompt_class, ClassId(2));
    }

    #[test]
    fn prompts_must_be_known_classes() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let seed = TrainPoint { id: 0, features: vec![1.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GenerationConfig::default();
        assert!(generate_positive(&o, &seed, ClassId(4), &cfg, &mut rng).is_err());
        assert!(generate_negative(&o, &seed, ClassId(6), &cfg, &mut rng).is_err());
    }

    #[test]
    fn unguided_noiseless_positive_drifts_to_the_global_mean() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let cfg = GenerationConfig { guidance_gamma: 0.0, eta_positive: 0.0, ..Default::default() };
        // seed at the class-1 mean, noised with ε = 0: the result is just an unconditional
        // deterministic reverse of √α_T·x, which contracts toward the origin (the mixture mean)
        let seed = TrainPoint { id: 0, features: w.components()[0].mean.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_positive_from_noise(&o, &seed, ClassId(1), &[0.0, 0.0], &cfg, &mut rng).unwrap();
        assert!(norm(&g.features) < norm(&seed.features));

        let guided = GenerationConfig { eta_positive: 0.0, ..Default::default() };
        let h = generate_positive_from_noise(&o, &seed, ClassId(1), &[0.0, 0.0], &guided, &mut rng).unwrap();
        let lp_g = w.log_class_posterior(&g.features, ClassId(1)).unwrap();
        let lp_h = w.log_class_posterior(&h.features, ClassId(1)).unwrap();
        assert!(lp_h >= lp_g);
    }

    #[test]
    fn pair_bank_counts_and_linkage() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        let seeds: Vec<TrainPoint> = (0..10)
            .map(|i| TrainPoint { id: 100 + i, features: vec![i as f64 - 5.0, 0.5 * i as f64] })
            .collect();
        let cfg = GenerationConfig { rng_seed: 9, ..Default::default() };
        let bank = generate_pair_bank(&o, &seeds, &cfg).unwrap();
        assert_eq!(bank.positives().len(), 20);
        assert_eq!(bank.negatives().len(), 20);
        for seed in &seeds {
            for y in [ClassId(1), ClassId(2)] {
                assert!(bank.find(Polarity::Positive, seed.id, y).is_some());
                assert!(bank.find(Polarity::Negative, seed.id, y).is_some());
            }
        }
        let one = generate_pair_bank_with_workers(&o, &seeds, &cfg, 1).unwrap();
        let four = generate_pair_bank_with_workers(&o, &seeds, &cfg, 4).unwrap();
        assert_eq!(one, bank);
        assert_eq!(four, bank);

        let mut buf = Vec::new();
        bank.write_csv(&mut buf).unwrap();
        let back = PairBank::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, bank);
    }

    fn round_trip_error(n_steps: usize) -> f64 {
        let s = default_schedule();
        let w = MixtureWorld::single_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let o = NoisePredictorOracle::new(&w, &s);
        let anchors = make_path(&s, n_steps, Direction::Forward).unwrap().timesteps().to_vec();
        let x0 = [1.0, -0.5];
        let inv = invert(&o, &x0, &anchors, None, InversionScheme::Euler).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = reverse_along(&o, inv.last().unwrap(), &anchors, None, 0.0, 0.0, &mut rng).unwrap();
        rel_err(&rec[0], &x0)
    }

    #[test]
    fn round_trip_error_shrinks_with_steps() {
        let errs: Vec<f64> = [10, 25, 50, 100].iter().map(|&n| round_trip_error(n)).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        assert!(errs[3] < 1e-3);
    }

    #[test]
    fn empty_seed_set_is_rejected() {
        let s = default_schedule();
        let w = MixtureWorld::desk();
        let o = NoisePredictorOracle::new(&w, &s);
        assert!(matches!(
            generate_pair_bank(&o, &[], &GenerationConfig::default()),
            Err(Error::EmptySet(_))
        ));
    }
}

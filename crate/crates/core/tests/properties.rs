use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use openmix::diffusion::{
    generate_negative, generate_pair_bank_with_workers, generate_positive, forward_noise, GenerationConfig, PairBank,
};
use openmix::oracle::NoisePredictorOracle;
use openmix::schedule::{build_linear_schedule, make_path, psi, Direction};
use openmix::trainer::{train, TrainConfig};
use openmix::labeling::LabelingConfig;
use openmix::world::{bayes_class_posterior, sample_dataset, time_marginal, DatasetSpec, MixtureWorld, TrainPoint};
use openmix::{ClassId, Role};

fn unit_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alphas_fall_and_psi_is_non_negative(
        steps in 2usize..200, lo in 1e-5f64..1e-3, span in 1e-4f64..0.05, n in 1usize..40,
    ) {
        let s = build_linear_schedule(steps, lo, lo + span).unwrap();
        for t in 0..steps {
            prop_assert!(s.alpha(t + 1) < s.alpha(t));
            prop_assert!(psi(s.alpha(t + 1), s.alpha(t), 0.0).unwrap() >= 0.0);
        }
        let n = n.min(steps);
        let fwd = make_path(&s, n, Direction::Forward).unwrap();
        let rev = make_path(&s, n, Direction::Reverse).unwrap();
        let mirrored: Vec<usize> = fwd.timesteps().iter().rev().copied().collect();
        prop_assert_eq!(mirrored.as_slice(), rev.timesteps());
    }

    #[test]
    fn posterior_sums_to_one(x0 in -15.0f64..15.0, x1 in -15.0f64..15.0) {
        let w = MixtureWorld::desk();
        let total: f64 = bayes_class_posterior(&w, &[x0, x1]).unwrap().iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn role_counts_follow_mismatch_ratio(n in 1usize..300, rho in 0.0f64..0.95, seed in any::<u64>()) {
        let w = MixtureWorld::desk();
        let spec = DatasetSpec { n_known_train: n, mismatch_rho: rho, n_test_per_role: 3, rng_seed: seed };
        let ds = sample_dataset(&w, &spec).unwrap();
        let unknown = (n as f64 * rho / (1.0 - rho)).round() as usize;
        prop_assert_eq!(ds.train.iter().filter(|s| s.role == Role::Known).count(), n);
        prop_assert_eq!(ds.train.iter().filter(|s| s.role == Role::Unknown).count(), unknown);
        prop_assert!(ds.train.iter().all(|s| s.role != Role::New));
    }
}

#[test]
fn forward_noise_matches_time_marginal_moments() {
    let w = MixtureWorld::desk();
    let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
    let class = ClassId(4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in [5, 40, 100] {
        let m = &time_marginal(&w, Some(class), &s, t).unwrap()[0];
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x0 = w.sample_class(class, &mut rng).unwrap();
                let eps = [unit_normal(&mut rng), unit_normal(&mut rng)];
                forward_noise(&x0, t, &eps, &s).unwrap()
            })
            .collect();
        for d in 0..2 {
            let mean = draws.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = (m.variance / n as f64).sqrt();
            // variance of the sample variance for a Gaussian is 2σ⁴/(n − 1)
            let se_var = (2.0 * m.variance * m.variance / (n - 1) as f64).sqrt();
            assert!((mean - m.mean[d]).abs() < 3.0 * se_mean, "t={t} d={d} mean {mean} vs {}", m.mean[d]);
            assert!((var - m.variance).abs() < 3.0 * se_var, "t={t} d={d} var {var} vs {}", m.variance);
        }
    }
}

/// Seeds drawn from the world paired with a random known class, kept when `keep` holds.
fn seeds(w: &MixtureWorld, n: usize, seed: u64, keep: impl Fn(&[f64], ClassId) -> bool) -> Vec<(TrainPoint, ClassId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = w.class_ids();
    let known = w.known_classes();
    let mut out = Vec::new();
    while out.len() < n {
        let c = classes[rng.random_range(0..classes.len())];
        let x = w.sample_class(c, &mut rng).unwrap();
        let y = known[rng.random_range(0..known.len())];
        if keep(&x, y) {
            out.push((TrainPoint { id: out.len() as u64, features: x }, y));
        }
    }
    out
}

#[test]
fn negatives_lower_the_prompt_posterior_on_average() {
    let w = MixtureWorld::desk();
    let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
    let o = NoisePredictorOracle::new(&w, &s);
    let post = |x: &[f64], y| w.log_class_posterior(x, y).unwrap().exp();
    let confident = seeds(&w, 100, 31, |x, y| post(x, y) > 0.9);
    let cfg = GenerationConfig::default();
    let drop: f64 = confident
        .iter()
        .map(|(p, y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.id);
            let g = generate_negative(&o, p, *y, &cfg, &mut rng).unwrap();
            post(&p.features, *y) - post(&g.features, *y)
        })
        .sum::<f64>()
        / confident.len() as f64;
    assert!(drop > 0.0, "mean posterior drop {drop}");
}

#[test]
fn positives_are_denser_under_the_prompt_class() {
    let w = MixtureWorld::desk();
    let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
    let o = NoisePredictorOracle::new(&w, &s);
    let all = seeds(&w, 100, 32, |_, _| true);
    for gamma in [1.0, 7.5] {
        let cfg = GenerationConfig { guidance_gamma: gamma, ..Default::default() };
        let gain: f64 = all
            .iter()
            .map(|(p, y)| {
                let mut rng = ChaCha8Rng::seed_from_u64(p.id);
                let g = generate_positive(&o, p, *y, &cfg, &mut rng).unwrap();
                o.log_density(&g.features, 0, Some(*y)).unwrap() - o.log_density(&p.features, 0, Some(*y)).unwrap()
            })
            .sum::<f64>()
            / all.len() as f64;
        assert!(gain > 0.0, "gamma {gamma}: mean log-density gain {gain}");
    }
}

#[test]
fn pair_bank_is_worker_independent_and_survives_csv() {
    let w = MixtureWorld::desk();
    let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
    let o = NoisePredictorOracle::new(&w, &s);
    let spec = DatasetSpec { n_known_train: 30, n_test_per_role: 1, ..Default::default() };
    let train = sample_dataset(&w, &spec).unwrap().train_view();
    let cfg = GenerationConfig { rng_seed: 9, ..Default::default() };
    let dumps: Vec<Vec<u8>> = [1, 3, 8]
        .iter()
        .map(|&k| {
            let mut buf = Vec::new();
            generate_pair_bank_with_workers(&o, &train, &cfg, k).unwrap().write_csv(&mut buf).unwrap();
            buf
        })
        .collect();
    assert!(dumps.windows(2).all(|d| d[0] == d[1]));
    let bank = PairBank::read_csv(dumps[0].as_slice()).unwrap();
    assert_eq!(bank.positives().len(), train.len() * 2);
    let mut again = Vec::new();
    bank.write_csv(&mut again).unwrap();
    assert_eq!(again, dumps[0]);
}

#[test]
fn open_loss_falls_over_the_first_twenty_epochs() {
    let w = MixtureWorld::desk();
    let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
    let o = NoisePredictorOracle::new(&w, &s);
    let ds = sample_dataset(&w, &DatasetSpec::default()).unwrap();
    let bank = generate_pair_bank_with_workers(&o, &ds.train_view(), &GenerationConfig::default(), 4).unwrap();
    let cfg = TrainConfig { epochs: 20, labeling: LabelingConfig { rounds: 0, ..Default::default() }, ..Default::default() };
    let out = train(&w, &ds, &bank, &cfg).unwrap();
    let losses: Vec<f64> = out.epochs().map(|e| e.pool_loss.unwrap()).collect();
    assert!(losses[19] < losses[0], "{losses:?}");
}

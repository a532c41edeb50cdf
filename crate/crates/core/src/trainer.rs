//! Epoch loop over the unlabelled pool and the two pseudo-labelled sets, with periodic
//! confidence-based labelling.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    adam_step, AdamConfig, AdamState, BinaryHead, ClassifierModel, LossParts, LossTerm, LossWeights, Sample,
    DEFAULT_HIDDEN,
};
use crate::diffusion::{PairBank, Polarity};
use crate::labeling::{assign_pseudo_labels, LabelingConfig, PseudoLabel, PseudoLabelLedger, Selection};
use crate::rng;
use crate::world::{Dataset, MixtureWorld, Role, TrainPoint};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub hidden: usize,
    pub head: BinaryHead,
    pub labeling: LabelingConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 32,
            lr: 5e-3,
            lambda1: 1.0,
            lambda2: 2.0,
            hidden: DEFAULT_HIDDEN,
            head: BinaryHead::PairSoftmax,
            labeling: LabelingConfig::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size: must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr: must be positive, got {}", self.lr)));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden: must be at least 1".into()));
        }
        self.weights().validate()?;
        self.labeling.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    /// Seeds per pool batch: `⌈batch_size / K⌉`.
    pub fn pool_batch(&self, known: usize) -> usize {
        self.batch_size.div_ceil(known.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean losses of the three sources; `None` when the source was empty.
    pub pool: Option<LossParts>,
    pub known: Option<LossParts>,
    pub unknown: Option<LossParts>,
    pub pool_loss: Option<f64>,
    pub total: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingRecord {
    pub epoch: usize,
    pub round: usize,
    pub pool_before: usize,
    pub pool_after: usize,
    pub selected_known: usize,
    pub selected_other: usize,
    pub precision: Option<f64>,
    pub selections: Vec<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Epoch(EpochRecord),
    Labeling(LabelingRecord),
}

impl LogRecord {
    pub fn write_jsonl<W: Write>(records: &[LogRecord], mut out: W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: Vec<LogRecord>,
    pub ledger: PseudoLabelLedger,
}

impl TrainOutcome {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn labeling_rounds(&self) -> impl Iterator<Item = &LabelingRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Labeling(l) => Some(l),
            _ => None,
        })
    }
}

/// Fresh model for `world` under the config's seed.
pub fn init_model(world: &MixtureWorld, cfg: &TrainConfig) -> Result<ClassifierModel> {
    let mut r = rng::stream(cfg.rng_seed, &[0x171]);
    ClassifierModel::init(world.dims(), cfg.hidden, world.known_count(), cfg.head, &mut r)
}

struct Optimizer<'m> {
    model: &'m mut ClassifierModel,
    state: AdamState,
    adam: AdamConfig,
    weights: LossWeights,
    steps: usize,
}

impl Optimizer<'_> {
    fn step(&mut self, term: LossTerm<'_>, epoch: usize) -> Result<LossParts> {
        let (parts, grad) = self
            .model
            .gradients(std::slice::from_ref(&term), &self.weights)
            .map_err(|e| Error::NumericFault(format!("epoch {epoch}, step {}: {e}", self.steps)))?;
        let p = parts[0];
        if !p.weighted(&self.weights).is_finite() {
            return Err(Error::NumericFault(format!(
                "epoch {epoch}, step {}: non-finite loss {p:?}",
                self.steps
            )));
        }
        adam_step(self.model, &grad, &self.adam, &mut self.state)?;
        self.steps += 1;
        Ok(p)
    }
}

fn mean_parts(acc: LossParts, n: usize) -> Option<LossParts> {
    (n > 0).then(|| {
        let k = n as f64;
        LossParts { open_pairs: acc.open_pairs / k, open_pos: acc.open_pos / k, closed: acc.closed / k }
    })
}

/// Runs the training loop. The ledger starts with everything in the pool and the full bank in
/// the generated sets.
pub fn train(world: &MixtureWorld, dataset: &Dataset, bank: &PairBank, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<TrainPoint> = dataset.train_view();
    if train.is_empty() {
        return Err(Error::EmptySet("training set is empty".into()));
    }
    let k = world.known_count();
    let expected = train.len() * k;
    if bank.positives().len() != expected || bank.negatives().len() != expected {
        return Err(Error::InvalidConfig(format!(
            "pair bank holds {}/{} instances, expected {expected} per polarity",
            bank.positives().len(),
            bank.negatives().len()
        )));
    }
    let features: std::collections::HashMap<u64, &[f64]> =
        train.iter().map(|t| (t.id, t.features.as_slice())).collect();
    let truth: std::collections::HashMap<u64, PseudoLabel> = dataset
        .train
        .iter()
        .map(|s| {
            let l = if s.role == Role::Known { PseudoLabel::Known(s.true_class) } else { PseudoLabel::Other };
            (s.id, l)
        })
        .collect();

    let mut model = init_model(world, cfg)?;
    let mut ledger = PseudoLabelLedger::new(&train, bank, k, rng::derive_seed(cfg.rng_seed, &[0x1ab]))?;
    let mut log = Vec::new();
    let weights = cfg.weights();
    let mut opt = Optimizer {
        state: AdamState::new(model.param_count()),
        model: &mut model,
        adam: AdamConfig { lr: cfg.lr, ..Default::default() },
        weights,
        steps: 0,
    };
    let pool_batch = cfg.pool_batch(k);

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::stream(cfg.rng_seed, &[0x5b, epoch as u64]);
        let steps_before = opt.steps;

        // unlabelled pool: every seed brings its K positives and K negatives
        let mut pool: Vec<u64> = ledger.pool().iter().copied().collect();
        pool.shuffle(&mut shuffle);
        let mut pool_acc = LossParts::default();
        let mut pool_n = 0;
        for chunk in pool.chunks(pool_batch) {
            let mut term = LossTerm::default();
            for &id in chunk {
                for c in world.known_classes() {
                    for (pol, set) in [(Polarity::Positive, &mut term.positives), (Polarity::Negative, &mut term.negatives)] {
                        if let Some(i) = bank.find(pol, id, c) {
                            let g = bank.get(pol, i);
                            set.push(Sample { x: &g.features, class: g.prompt_class });
                        }
                    }
                }
            }
            pool_acc += opt.step(term, epoch)?;
            pool_n += 1;
        }

        // known-labelled: the real sample is the positive, its paired negative the negative
        let mut known: Vec<(u64, crate::ClassId)> = ledger.d_known().iter().map(|(a, b)| (*a, *b)).collect();
        known.shuffle(&mut shuffle);
        let mut known_acc = LossParts::default();
        let mut known_n = 0;
        for chunk in known.chunks(cfg.batch_size) {
            let mut term = LossTerm::default();
            for &(id, y) in chunk {
                term.positives.push(Sample { x: features[&id], class: y });
                let g = bank.get(Polarity::Negative, ledger.dn_prime()[&id]);
                term.negatives.push(Sample { x: &g.features, class: g.prompt_class });
            }
            known_acc += opt.step(term, epoch)?;
            known_n += 1;
        }

        // other-labelled: the paired positive is the positive, the real sample the negative
        let mut unknown: Vec<u64> = ledger.d_unknown().iter().copied().collect();
        unknown.shuffle(&mut shuffle);
        let mut unknown_acc = LossParts::default();
        let mut unknown_n = 0;
        for chunk in unknown.chunks(cfg.batch_size) {
            let mut term = LossTerm::default();
            for &id in chunk {
                let g = bank.get(Polarity::Positive, ledger.dp_prime()[&id]);
                term.positives.push(Sample { x: &g.features, class: g.prompt_class });
                term.negatives.push(Sample { x: features[&id], class: g.prompt_class });
            }
            unknown_acc += opt.step(term, epoch)?;
            unknown_n += 1;
        }

        let pool_parts = mean_parts(pool_acc, pool_n);
        let known_parts = mean_parts(known_acc, known_n);
        let unknown_parts = mean_parts(unknown_acc, unknown_n);
        let total = [pool_parts, known_parts, unknown_parts]
            .iter()
            .flatten()
            .map(|p| p.weighted(&weights))
            .sum();
        log.push(LogRecord::Epoch(EpochRecord {
            epoch,
            pool: pool_parts,
            known: known_parts,
            unknown: unknown_parts,
            pool_loss: pool_parts.map(|p| p.weighted(&weights)),
            total,
            steps: opt.steps - steps_before,
        }));

        if cfg.labeling.due(epoch, ledger.rounds_done()) {
            let report = assign_pseudo_labels(opt.model, &mut ledger, &train, bank, &cfg.labeling)?;
            let precision = report.precision(|id| truth[&id]);
            log.push(LogRecord::Labeling(LabelingRecord {
                epoch,
                round: report.round,
                pool_before: report.pool_before,
                pool_after: report.pool_after,
                selected_known: report.selected_known,
                selected_other: report.selected_other,
                precision,
                selections: report.selections,
            }));
        }
    }
    let ids: BTreeSet<u64> = train.iter().map(|t| t.id).collect();
    ledger.check_invariants(&ids, bank)?;
    Ok(TrainOutcome { model, log, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{generate_pair_bank, GenerationConfig};
    use crate::oracle::NoisePredictorOracle;
    use crate::schedule::build_linear_schedule;
    use crate::world::{sample_dataset, DatasetSpec};

    fn small_setup() -> (MixtureWorld, Dataset, PairBank) {
        let world = MixtureWorld::desk();
        let spec = DatasetSpec { n_known_train: 40, mismatch_rho: 0.5, n_test_per_role: 10, rng_seed: 1 };
        let ds = sample_dataset(&world, &spec).unwrap();
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let o = NoisePredictorOracle::new(&world, &s);
        let gen = GenerationConfig { n_steps: 10, rng_seed: 2, ..Default::default() };
        let bank = generate_pair_bank(&o, &ds.train_view(), &gen).unwrap();
        (world, ds, bank)
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let (world, ds, bank) = small_setup();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&world, &ds, &bank, &cfg).unwrap();
        assert_eq!(out.model, init_model(&world, &cfg).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn without_labeling_only_the_pool_term_is_trained() {
        let (world, ds, bank) = small_setup();
        let cfg = TrainConfig {
            epochs: 5,
            labeling: LabelingConfig { rounds: 0, ..Default::default() },
            ..Default::default()
        };
        let out = train(&world, &ds, &bank, &cfg).unwrap();
        for e in out.epochs() {
            assert!(e.known.is_none() && e.unknown.is_none());
            assert_eq!(Some(e.total), e.pool_loss);
        }
        assert_eq!(out.labeling_rounds().count(), 0);
        assert_eq!(out.ledger.pool().len(), ds.train.len());
    }

    #[test]
    fn runs_are_reproducible_and_log_labeling() {
        let (world, ds, bank) = small_setup();
        let cfg = TrainConfig {
            epochs: 20,
            labeling: LabelingConfig { interval: 5, rounds: 3, threshold: 0.9 },
            rng_seed: 4,
            ..Default::default()
        };
        let a = train(&world, &ds, &bank, &cfg).unwrap();
        let b = train(&world, &ds, &bank, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let rounds: Vec<&LabelingRecord> = a.labeling_rounds().collect();
        assert_eq!(rounds.len(), 3);
        assert!(rounds.windows(2).all(|w| w[1].pool_before <= w[0].pool_before));
        let first = a.epochs().next().unwrap().pool_loss.unwrap();
        let last = a.epochs().last().unwrap().pool_loss.unwrap();
        assert!(last < first);

        let mut buf = Vec::new();
        LogRecord::write_jsonl(&a.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), a.log.len());
        assert!(text.lines().next().unwrap().contains("\"kind\":\"epoch\""));
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let (world, ds, bank) = small_setup();
        let short = PairBank::new(bank.positives()[..4].to_vec(), bank.negatives()[..4].to_vec()).unwrap();
        assert!(train(&world, &ds, &short, &TrainConfig::default()).is_err());
        assert_eq!(TrainConfig::default().pool_batch(2), 16);
        assert_eq!(TrainConfig::default().pool_batch(3), 11);
    }
}

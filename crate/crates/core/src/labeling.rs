//! Confidence-based pseudo-labelling of the unlabelled pool and the bookkeeping that pairs
//! each newly labelled sample with one of its generated instances.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, ProbOutputs};
use crate::diffusion::{PairBank, Polarity};
use crate::rng;
use crate::vecops::argmax;
use crate::world::TrainPoint;
use crate::{ClassId, Error, Result};

/// `q ∈ R^{K+1}`: `q_j = (1 − ∏(1 − p_i))·p̂_j` for known `j`, `q_{K+1} = ∏(1 − p_i)`.
pub fn open_set_distribution(probs: &ProbOutputs) -> Vec<f64> {
    let other: f64 = probs.p_binary.iter().map(|p| 1.0 - p).product();
    let known = 1.0 - other;
    let mut q: Vec<f64> = probs.p_closed.iter().map(|p| known * p).collect();
    q.push(other);
    q
}

/// `q̃ ∈ R^{K+1}`: `q̃_j = p̂_j·p_j` for known `j`, `q̃_{K+1} = 1 − Σ p̂_j·p_j`.
pub fn hybrid_distribution(probs: &ProbOutputs) -> Vec<f64> {
    let mut q: Vec<f64> = probs.p_closed.iter().zip(&probs.p_binary).map(|(a, b)| a * b).collect();
    let other = 1.0 - q.iter().sum::<f64>();
    q.push(other.clamp(0.0, 1.0));
    q
}

/// A pseudo-label: one of the known classes or the unified "other" class `K + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabel {
    Known(ClassId),
    Other,
}

impl PseudoLabel {
    /// Maps an index of `q` (0-based, `K` meaning "other") to a label.
    pub fn from_index(j: usize, known: usize) -> Self {
        if j < known {
            PseudoLabel::Known(ClassId(j as u32 + 1))
        } else {
            PseudoLabel::Other
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Both `max q` and `max q̃` must reach this value.
    pub threshold: f64,
    /// Epochs between labelling rounds.
    pub interval: usize,
    /// Maximum number of rounds.
    pub rounds: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { threshold: 0.98, interval: 40, rounds: 10 }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "labeling.threshold: must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.rounds > 0 && self.interval == 0 {
            return Err(Error::InvalidConfig("labeling.interval: must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether a labelling round runs after `epoch` (1-based) given `done` finished rounds.
    pub fn due(&self, epoch: usize, done: usize) -> bool {
        done < self.rounds && self.interval > 0 && epoch % self.interval == 0
    }
}

/// Outcome of the agreement-and-threshold rule for one sample, if it qualifies.
pub fn select_label(q: &[f64], q_tilde: &[f64], threshold: f64) -> Option<(usize, f64, f64)> {
    let j = argmax(q);
    let jt = argmax(q_tilde);
    (j == jt && q[j] >= threshold && q_tilde[j] >= threshold).then_some((j, q[j], q_tilde[j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub id: u64,
    pub label: PseudoLabel,
    pub max_q: f64,
    pub max_q_tilde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub round: usize,
    pub pool_before: usize,
    pub pool_after: usize,
    pub selected_known: usize,
    pub selected_other: usize,
    pub selections: Vec<Selection>,
}

impl SelectionReport {
    /// Fraction of selections whose label matches `truth`; `None` when nothing was selected.
    pub fn precision<F: Fn(u64) -> PseudoLabel>(&self, truth: F) -> Option<f64> {
        if self.selections.is_empty() {
            return None;
        }
        let ok = self.selections.iter().filter(|s| truth(s.id) == s.label).count();
        Some(ok as f64 / self.selections.len() as f64)
    }
}

/// Partition of the training pool and the generated instances still in play.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelLedger {
    known: usize,
    seed: u64,
    rounds_done: usize,
    pool: BTreeSet<u64>,
    d_known: BTreeMap<u64, ClassId>,
    d_unknown: BTreeSet<u64>,
    dp: BTreeSet<usize>,
    dn: BTreeSet<usize>,
    /// Known-labelled id → index of its paired negative.
    dn_prime: BTreeMap<u64, usize>,
    /// Other-labelled id → index of its paired positive.
    dp_prime: BTreeMap<u64, usize>,
}

impl PseudoLabelLedger {
    /// Everything in the pool, every generated instance in `dp`/`dn`.
    pub fn new(train: &[TrainPoint], bank: &PairBank, known: usize, seed: u64) -> Result<Self> {
        let pool: BTreeSet<u64> = train.iter().map(|t| t.id).collect();
        if pool.len() != train.len() {
            return Err(Error::InvalidConfig("training ids must be unique".into()));
        }
        for g in bank.positives().iter().chain(bank.negatives()) {
            if !pool.contains(&g.seed_id) {
                return Err(Error::InvalidConfig(format!(
                    "generated instance refers to missing training id {}",
                    g.seed_id
                )));
            }
        }
        Ok(Self {
            known,
            seed,
            rounds_done: 0,
            pool,
            d_known: BTreeMap::new(),
            d_unknown: BTreeSet::new(),
            dp: (0..bank.positives().len()).collect(),
            dn: (0..bank.negatives().len()).collect(),
            dn_prime: BTreeMap::new(),
            dp_prime: BTreeMap::new(),
        })
    }

    pub fn pool(&self) -> &BTreeSet<u64> {
        &self.pool
    }

    pub fn d_known(&self) -> &BTreeMap<u64, ClassId> {
        &self.d_known
    }

    pub fn d_unknown(&self) -> &BTreeSet<u64> {
        &self.d_unknown
    }

    pub fn dp(&self) -> &BTreeSet<usize> {
        &self.dp
    }

    pub fn dn(&self) -> &BTreeSet<usize> {
        &self.dn
    }

    pub fn dn_prime(&self) -> &BTreeMap<u64, usize> {
        &self.dn_prime
    }

    pub fn dp_prime(&self) -> &BTreeMap<u64, usize> {
        &self.dp_prime
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    fn take_seed_instances(&mut self, bank: &PairBank, id: u64) {
        for c in 1..=self.known as u32 {
            if let Some(i) = bank.find(Polarity::Positive, id, ClassId(c)) {
                self.dp.remove(&i);
            }
            if let Some(i) = bank.find(Polarity::Negative, id, ClassId(c)) {
                self.dn.remove(&i);
            }
        }
    }

    /// Moves `id` out of the pool under `label` and pairs it with a generated counterpart.
    pub fn commit(&mut self, bank: &PairBank, id: u64, label: PseudoLabel) -> Result<()> {
        if !self.pool.contains(&id) {
            return Err(Error::InvalidConfig(format!("id {id} is not in the pool")));
        }
        match label {
            PseudoLabel::Known(y) => {
                if y.0 == 0 || y.0 as usize > self.known {
                    return Err(Error::UnknownClass(y));
                }
                let neg = bank
                    .find(Polarity::Negative, id, y)
                    .ok_or_else(|| Error::InvalidConfig(format!("no negative for seed {id} class {y}")))?;
                self.d_known.insert(id, y);
                self.dn_prime.insert(id, neg);
            }
            PseudoLabel::Other => {
                let mut r = rng::stream(self.seed, &[id]);
                let y = ClassId(r.random_range(1..=self.known as u32));
                let pos = bank
                    .find(Polarity::Positive, id, y)
                    .ok_or_else(|| Error::InvalidConfig(format!("no positive for seed {id} class {y}")))?;
                self.d_unknown.insert(id);
                self.dp_prime.insert(id, pos);
            }
        }
        self.pool.remove(&id);
        self.take_seed_instances(bank, id);
        Ok(())
    }

    /// Checks disjointness, coverage of `train_ids` and pairing consistency.
    pub fn check_invariants(&self, train_ids: &BTreeSet<u64>, bank: &PairBank) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(format!("ledger invariant: {m}")));
        let mut all = self.pool.clone();
        for id in self.d_known.keys().chain(&self.d_unknown) {
            if !all.insert(*id) {
                return fail(format!("id {id} appears twice"));
            }
        }
        if &all != train_ids {
            return fail("partition does not cover the training ids".into());
        }
        if self.dn_prime.len() != self.d_known.len() || self.dp_prime.len() != self.d_unknown.len() {
            return fail("pair counts differ from labelled counts".into());
        }
        for (id, y) in &self.d_known {
            let g = bank.get(Polarity::Negative, self.dn_prime[id]);
            if g.seed_id != *id || g.prompt_class != *y {
                return fail(format!("negative pair of {id} does not match"));
            }
        }
        for id in &self.d_unknown {
            let g = bank.get(Polarity::Positive, self.dp_prime[id]);
            if g.seed_id != *id || g.prompt_class.0 == 0 || g.prompt_class.0 as usize > self.known {
                return fail(format!("positive pair of {id} does not match"));
            }
        }
        for &i in &self.dp {
            if !self.pool.contains(&bank.get(Polarity::Positive, i).seed_id) {
                return fail(format!("positive {i} belongs to a labelled seed"));
            }
        }
        for &i in &self.dn {
            if !self.pool.contains(&bank.get(Polarity::Negative, i).seed_id) {
                return fail(format!("negative {i} belongs to a labelled seed"));
            }
        }
        Ok(())
    }
}

/// One labelling round over the pool. Scores are computed in parallel; commits happen in id
/// order.
pub fn assign_pseudo_labels(
    model: &ClassifierModel,
    ledger: &mut PseudoLabelLedger,
    train: &[TrainPoint],
    bank: &PairBank,
    cfg: &LabelingConfig,
) -> Result<SelectionReport> {
    cfg.validate()?;
    let by_id: BTreeMap<u64, &TrainPoint> = train.iter().map(|t| (t.id, t)).collect();
    let pool: Vec<u64> = ledger.pool.iter().copied().collect();
    let k = ledger.known;
    let scored = pool
        .par_iter()
        .map(|id| {
            let point = by_id
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(format!("pool id {id} missing from training set")))?;
            let probs = model.forward(&point.features)?;
            let q = open_set_distribution(&probs);
            let qt = hybrid_distribution(&probs);
            Ok(select_label(&q, &qt, cfg.threshold).map(|(j, mq, mqt)| Selection {
                id: *id,
                label: PseudoLabel::from_index(j, k),
                max_q: mq,
                max_q_tilde: mqt,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let selections: Vec<Selection> = scored.into_iter().flatten().collect();
    let pool_before = ledger.pool.len();
    for s in &selections {
        ledger.commit(bank, s.id, s.label)?;
    }
    ledger.rounds_done += 1;
    let selected_other = selections.iter().filter(|s| s.label == PseudoLabel::Other).count();
    Ok(SelectionReport {
        round: ledger.rounds_done,
        pool_before,
        pool_after: ledger.pool.len(),
        selected_known: selections.len() - selected_other,
        selected_other,
        selections,
    })
}

//! Closed-set and open-set accuracies and the balance score.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::labeling::open_set_distribution;
use crate::vecops::argmax;
use crate::world::{LabeledSample, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenAccuracy {
    pub known: f64,
    pub unknown: f64,
    pub new: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closed_known_acc: f64,
    pub open_known_acc: f64,
    pub open_unknown_acc: f64,
    pub open_new_acc: f64,
    pub balance: f64,
}

impl EvalReport {
    pub fn new(closed_known_acc: f64, open: OpenAccuracy) -> Self {
        Self {
            closed_known_acc,
            open_known_acc: open.known,
            open_unknown_acc: open.unknown,
            open_new_acc: open.new,
            balance: balance_score(open.known, open.unknown, open.new),
        }
    }

    pub const CSV_HEADER: &'static str = "closed_known_acc,open_known_acc,open_unknown_acc,open_new_acc,balance";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(
            out,
            "{},{},{},{},{}",
            self.closed_known_acc, self.open_known_acc, self.open_unknown_acc, self.open_new_acc, self.balance
        )?;
        Ok(())
    }
}

/// Mean of the three values minus their sample (n − 1) standard deviation.
pub fn balance_score(known: f64, unknown: f64, new: f64) -> f64 {
    let v = [known, unknown, new];
    // offsets from the first value keep equal inputs exact
    let mean = known + ((unknown - known) + (new - known)) / 3.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
    mean - var.sqrt()
}

/// Closed-set accuracy of `predict` (0-based known index) over the known-role samples.
pub fn closed_accuracy_with<F>(samples: &[LabeledSample], predict: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<usize>,
{
    let known: Vec<&LabeledSample> = samples.iter().filter(|s| s.role == Role::Known).collect();
    if known.is_empty() {
        return Err(Error::EmptySet("no known-role test samples".into()));
    }
    let mut hits = 0usize;
    for s in &known {
        if predict(&s.features)? + 1 == s.true_class.0 as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / known.len() as f64)
}

/// Open-set accuracies when samples are classified by `argmax q` over `K + 1` classes; the
/// last index means "other".
pub fn open_accuracy_with<F>(samples: &[LabeledSample], known_count: usize, q_of: F) -> Result<OpenAccuracy>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for s in samples {
        let q = q_of(&s.features)?;
        if q.len() != known_count + 1 {
            return Err(Error::DimensionMismatch { expected: known_count + 1, got: q.len() });
        }
        let j = argmax(&q);
        let (slot, correct) = match s.role {
            Role::Known => (0, j + 1 == s.true_class.0 as usize),
            Role::Unknown => (1, j == known_count),
            Role::New => (2, j == known_count),
        };
        totals[slot] += 1;
        hits[slot] += usize::from(correct);
    }
    for (slot, role) in [Role::Known, Role::Unknown, Role::New].iter().enumerate() {
        if totals[slot] == 0 {
            return Err(Error::EmptySet(format!("test set has no {} samples", role.as_str())));
        }
    }
    let frac = |i: usize| hits[i] as f64 / totals[i] as f64;
    Ok(OpenAccuracy { known: frac(0), unknown: frac(1), new: frac(2) })
}

pub fn evaluate_closed(model: &ClassifierModel, samples: &[LabeledSample]) -> Result<f64> {
    closed_accuracy_with(samples, |x| model.predict_closed(x))
}

pub fn evaluate_open(model: &ClassifierModel, samples: &[LabeledSample]) -> Result<OpenAccuracy> {
    open_accuracy_with(samples, model.known_count(), |x| Ok(open_set_distribution(&model.forward(x)?)))
}

pub fn evaluate(model: &ClassifierModel, test: &[LabeledSample]) -> Result<EvalReport> {
    Ok(EvalReport::new(evaluate_closed(model, test)?, evaluate_open(model, test)?))
}

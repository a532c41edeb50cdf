//! One-hidden-layer classifier with a one-vs-all open-set head and a closed-set head, its
//! losses and their hand-derived gradients, plus Adam.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vecops::{argmax, dot};
use crate::{ClassId, Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_HIDDEN: usize = 64;

/// How the open head turns logits into per-class binary probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryHead {
    /// `2K` logits; class `j` owns the pair `(2j, 2j+1)` and `p(j|x)` is the softmax of the
    /// pair's first entry.
    #[default]
    PairSoftmax,
    /// `K` logits; `p(j|x) = sigmoid(z_j)`.
    Sigmoid,
}

impl BinaryHead {
    fn as_str(self) -> &'static str {
        match self {
            BinaryHead::PairSoftmax => "pair_softmax",
            BinaryHead::Sigmoid => "sigmoid",
        }
    }

    fn outputs(self, k: usize) -> usize {
        match self {
            BinaryHead::PairSoftmax => 2 * k,
            BinaryHead::Sigmoid => k,
        }
    }

    /// Index of the logit that scores "is class `j`".
    fn positive(self, j: usize) -> usize {
        match self {
            BinaryHead::PairSoftmax => 2 * j,
            BinaryHead::Sigmoid => j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    dims: usize,
    hidden: usize,
    known: usize,
    open: usize,
}

impl Layout {
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.dims
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }
    fn wo(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.open * self.hidden
    }
    fn bo(&self) -> std::ops::Range<usize> {
        let s = self.wo().end;
        s..s + self.open
    }
    fn wc(&self) -> std::ops::Range<usize> {
        let s = self.bo().end;
        s..s + self.known * self.hidden
    }
    fn bc(&self) -> std::ops::Range<usize> {
        let s = self.wc().end;
        s..s + self.known
    }
    fn len(&self) -> usize {
        self.bc().end
    }
    fn tensors(&self) -> [(&'static str, std::ops::Range<usize>, usize, usize); 6] {
        [
            ("encoder.weight", self.w1(), self.hidden, self.dims),
            ("encoder.bias", self.b1(), self.hidden, 1),
            ("open_head.weight", self.wo(), self.open, self.hidden),
            ("open_head.bias", self.bo(), self.open, 1),
            ("closed_head.weight", self.wc(), self.known, self.hidden),
            ("closed_head.bias", self.bc(), self.known, 1),
        ]
    }
}

/// Shared tanh encoder `R^d → R^h` feeding an open head and a `K`-way closed head. All
/// parameters live in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    layout: Layout,
    head: BinaryHead,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbOutputs {
    pub p_binary: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub p_closed: Vec<f64>,
}

impl ProbOutputs {
    /// Validates shapes, ranges and normalization (within 1e-9).
    pub fn new(p_binary: Vec<f64>, p_bar: Vec<f64>, p_closed: Vec<f64>) -> Result<Self> {
        let k = p_binary.len();
        if k == 0 || p_bar.len() != k || p_closed.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: p_bar.len().max(p_closed.len()) });
        }
        if p_binary.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("p_binary entries must lie in [0, 1]".into()));
        }
        for (name, v) in [("p_bar", &p_bar), ("p_closed", &p_closed)] {
            if v.iter().any(|p| !(*p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("{name} must be a distribution")));
            }
        }
        Ok(Self { p_binary, p_bar, p_closed })
    }

    pub fn known_count(&self) -> usize {
        self.p_binary.len()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−ln clamp(p)` and its derivative in `p` (zero where the clamp is active).
fn neg_log_clamped(p: f64) -> (f64, f64) {
    if p < PROB_CLAMP {
        (-PROB_CLAMP.ln(), 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (-(1.0 - PROB_CLAMP).ln(), 0.0)
    } else {
        (-p.ln(), -1.0 / p)
    }
}

struct Activations {
    hidden: Vec<f64>,
    probs: ProbOutputs,
}

/// One labelled input to a loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub class: ClassId,
}

/// The generated-pair loss inputs for one source: positives feed every term, negatives only
/// the binary term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerm<'a> {
    pub positives: Vec<Sample<'a>>,
    pub negatives: Vec<Sample<'a>>,
}

impl LossTerm<'_> {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda1/lambda2: must be >= 0, got {}, {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Component values of one generated-pair loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub open_pairs: f64,
    pub open_pos: f64,
    pub closed: f64,
}

impl LossParts {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.open_pairs + w.lambda2 * (self.open_pos + self.closed)
    }
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.open_pairs += o.open_pairs;
        self.open_pos += o.open_pos;
        self.closed += o.closed;
    }
}

/// Per-component multipliers applied when accumulating gradients.
#[derive(Debug, Clone, Copy)]
struct TermScales {
    pos_binary: f64,
    neg_binary: f64,
    open_pos: f64,
    closed: f64,
}

impl ClassifierModel {
    /// All parameters zero.
    pub fn zeros(dims: usize, hidden: usize, known: usize, head: BinaryHead) -> Result<Self> {
        if dims == 0 || hidden == 0 || known == 0 {
            return Err(Error::InvalidConfig(format!(
                "model sizes must be positive, got dims {dims}, hidden {hidden}, known {known}"
            )));
        }
        let layout = Layout { dims, hidden, known, open: head.outputs(known) };
        Ok(Self { layout, head, params: vec![0.0; layout.len()] })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: usize, hidden: usize, known: usize, head: BinaryHead, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(dims, hidden, known, head)?;
        let l = m.layout;
        for (range, fan_in) in [(l.w1(), l.dims), (l.wo(), l.hidden), (l.wc(), l.hidden)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut m.params[range] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(m)
    }

    pub fn from_params(dims: usize, hidden: usize, known: usize, head: BinaryHead, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(dims, hidden, known, head)?;
        if params.len() != m.params.len() {
            return Err(Error::DimensionMismatch { expected: m.params.len(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericFault("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> usize {
        self.layout.dims
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn known_count(&self) -> usize {
        self.layout.known
    }

    pub fn head(&self) -> BinaryHead {
        self.head
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets the positive/negative logit biases of class `j` (0-based) on the open head.
    pub fn set_open_bias(&mut self, j: usize, positive: f64, negative: f64) {
        let bo = self.layout.bo();
        let base = bo.start;
        match self.head {
            BinaryHead::PairSoftmax => {
                self.params[base + 2 * j] = positive;
                self.params[base + 2 * j + 1] = negative;
            }
            BinaryHead::Sigmoid => self.params[base + j] = positive - negative,
        }
    }

    fn activations(&self, x: &[f64]) -> Result<Activations> {
        let l = &self.layout;
        if x.len() != l.dims {
            return Err(Error::DimensionMismatch { expected: l.dims, got: x.len() });
        }
        let w1 = &self.params[l.w1()];
        let b1 = &self.params[l.b1()];
        let hidden: Vec<f64> = (0..l.hidden)
            .map(|r| (dot(&w1[r * l.dims..(r + 1) * l.dims], x) + b1[r]).tanh())
            .collect();
        let affine = |w: &[f64], b: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).map(|r| dot(&w[r * l.hidden..(r + 1) * l.hidden], &hidden) + b[r]).collect()
        };
        let open_logits = affine(&self.params[l.wo()], &self.params[l.bo()], l.open);
        let closed_logits = affine(&self.params[l.wc()], &self.params[l.bc()], l.known);
        if open_logits.iter().chain(&closed_logits).any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite logits".into()));
        }
        let p_binary = (0..l.known)
            .map(|j| match self.head {
                BinaryHead::PairSoftmax => sigmoid(open_logits[2 * j] - open_logits[2 * j + 1]),
                BinaryHead::Sigmoid => sigmoid(open_logits[j]),
            })
            .collect();
        let positives: Vec<f64> = (0..l.known).map(|j| open_logits[self.head.positive(j)]).collect();
        let probs = ProbOutputs { p_binary, p_bar: softmax(&positives), p_closed: softmax(&closed_logits) };
        Ok(Activations { hidden, probs })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbOutputs> {
        Ok(self.activations(x)?.probs)
    }

    /// Closed-set prediction (0-based index into the known classes).
    pub fn predict_closed(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.p_closed))
    }

    fn class_index(&self, c: ClassId) -> Result<usize> {
        let j = c.0 as usize;
        if j == 0 || j > self.layout.known {
            return Err(Error::UnknownClass(c));
        }
        Ok(j - 1)
    }

    /// Adds the gradient of one sample's scaled losses to `grad` and returns the raw
    /// (unscaled) per-component values.
    fn accumulate(
        &self,
        s: &Sample<'_>,
        positive: bool,
        scales: &TermScales,
        grad: Option<&mut [f64]>,
    ) -> Result<LossParts> {
        let l = self.layout;
        let j = self.class_index(s.class)?;
        let act = self.activations(s.x)?;
        let p = act.probs.p_binary[j];
        let mut parts = LossParts::default();
        let mut d_open = vec![0.0; l.open];
        let mut d_closed = vec![0.0; l.known];

        // binary term, through u = logit difference (or single logit)
        let (val, dval_dp, scale) = if positive {
            let (v, d) = neg_log_clamped(p);
            (v, d, scales.pos_binary)
        } else {
            let (v, d) = neg_log_clamped(1.0 - p);
            (v, -d, scales.neg_binary)
        };
        parts.open_pairs = val;
        let du = scale * dval_dp * p * (1.0 - p);
        match self.head {
            BinaryHead::PairSoftmax => {
                d_open[2 * j] += du;
                d_open[2 * j + 1] -= du;
            }
            BinaryHead::Sigmoid => d_open[j] += du,
        }

        if positive {
            let (v, d) = neg_log_clamped(act.probs.p_bar[j]);
            parts.open_pos = v;
            if d != 0.0 {
                for (c, pb) in act.probs.p_bar.iter().enumerate() {
                    let g = pb - if c == j { 1.0 } else { 0.0 };
                    d_open[self.head.positive(c)] += scales.open_pos * g;
                }
            }
            let (v, d) = neg_log_clamped(act.probs.p_closed[j]);
            parts.closed = v;
            if d != 0.0 {
                for (c, pc) in act.probs.p_closed.iter().enumerate() {
                    d_closed[c] += scales.closed * (pc - if c == j { 1.0 } else { 0.0 });
                }
            }
        }

        if let Some(grad) = grad {
            let h = &act.hidden;
            let mut d_hidden = vec![0.0; l.hidden];
            for (heads, (w, b), dz) in [
                (l.open, (l.wo(), l.bo()), &d_open),
                (l.known, (l.wc(), l.bc()), &d_closed),
            ] {
                for r in 0..heads {
                    if dz[r] == 0.0 {
                        continue;
                    }
                    let row = w.start + r * l.hidden;
                    for c in 0..l.hidden {
                        grad[row + c] += dz[r] * h[c];
                        d_hidden[c] += dz[r] * self.params[row + c];
                    }
                    grad[b.start + r] += dz[r];
                }
            }
            let (w1, b1) = (l.w1(), l.b1());
            for r in 0..l.hidden {
                let da = d_hidden[r] * (1.0 - h[r] * h[r]);
                if da == 0.0 {
                    continue;
                }
                for c in 0..l.dims {
                    grad[w1.start + r * l.dims + c] += da * s.x[c];
                }
                grad[b1.start + r] += da;
            }
        }
        Ok(parts)
    }

    fn term_pass(&self, term: &LossTerm<'_>, w: &LossWeights, mut grad: Option<&mut [f64]>) -> Result<LossParts> {
        let np = term.positives.len() as f64;
        let nn = term.negatives.len() as f64;
        let mut parts = LossParts::default();
        let pos_scales = TermScales {
            pos_binary: w.lambda1 / np,
            neg_binary: 0.0,
            open_pos: w.lambda2 / np,
            closed: w.lambda2 / np,
        };
        for s in &term.positives {
            let p = self.accumulate(s, true, &pos_scales, grad.as_deref_mut())?;
            parts.open_pairs += p.open_pairs / np;
            parts.open_pos += p.open_pos / np;
            parts.closed += p.closed / np;
        }
        let neg_scales = TermScales { pos_binary: 0.0, neg_binary: w.lambda1 / nn, open_pos: 0.0, closed: 0.0 };
        for s in &term.negatives {
            let p = self.accumulate(s, false, &neg_scales, grad.as_deref_mut())?;
            parts.open_pairs += p.open_pairs / nn;
        }
        Ok(parts)
    }

    /// Components of one generated-pair loss; empty sets contribute zero.
    pub fn loss_parts(&self, term: &LossTerm<'_>) -> Result<LossParts> {
        self.term_pass(term, &LossWeights::default(), None)
    }

    /// Mean `−ln p(y|x)` over positives plus mean `−ln(1 − p(y|x))` over negatives.
    pub fn loss_open_pairs(&self, positives: &[Sample<'_>], negatives: &[Sample<'_>]) -> Result<f64> {
        let term = LossTerm { positives: positives.to_vec(), negatives: negatives.to_vec() };
        Ok(self.loss_parts(&term)?.open_pairs)
    }

    /// Mean `−ln p̄(y|x)` over positives.
    pub fn loss_open_pos(&self, positives: &[Sample<'_>]) -> Result<f64> {
        let term = LossTerm { positives: positives.to_vec(), negatives: Vec::new() };
        Ok(self.loss_parts(&term)?.open_pos)
    }

    /// Mean `−ln p̂(y|x)` over positives.
    pub fn loss_closed(&self, positives: &[Sample<'_>]) -> Result<f64> {
        let term = LossTerm { positives: positives.to_vec(), negatives: Vec::new() };
        Ok(self.loss_parts(&term)?.closed)
    }

    /// `λ₁·L_open_pairs + λ₂·(L_open_pos + L_closed)`.
    pub fn loss_generated(&self, term: &LossTerm<'_>, w: &LossWeights) -> Result<f64> {
        w.validate()?;
        Ok(self.loss_parts(term)?.weighted(w))
    }

    /// Sum of [`Self::loss_generated`] over the given source terms.
    pub fn total_loss(&self, terms: &[LossTerm<'_>], w: &LossWeights) -> Result<f64> {
        terms.iter().map(|t| self.loss_generated(t, w)).sum()
    }

    /// Gradient of [`Self::total_loss`] in the flat parameter layout, with the per-term parts.
    pub fn gradients(&self, terms: &[LossTerm<'_>], w: &LossWeights) -> Result<(Vec<LossParts>, Vec<f64>)> {
        w.validate()?;
        let mut grad = vec![0.0; self.params.len()];
        let parts = terms
            .iter()
            .map(|t| self.term_pass(t, w, Some(&mut grad)))
            .collect::<Result<Vec<_>>>()?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFault("non-finite gradient".into()));
        }
        Ok((parts, grad))
    }

    /// Text checkpoint: a header naming the shape, then one line per tensor.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let l = &self.layout;
        writeln!(out, "openmix-classifier 1")?;
        writeln!(
            out,
            "dims {} hidden {} known {} head {}",
            l.dims,
            l.hidden,
            l.known,
            self.head.as_str()
        )?;
        for (name, range, rows, cols) in l.tensors() {
            let mut line = format!("{name} {rows} {cols}");
            for v in &self.params[range] {
                write!(line, " {v}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint: missing {what}")))?
                .map_err(Error::from)
        };
        if next("magic")?.trim() != "openmix-classifier 1" {
            return Err(Error::Parse("checkpoint: bad magic line".into()));
        }
        let header = next("shape header")?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 8 || f[0] != "dims" || f[2] != "hidden" || f[4] != "known" || f[6] != "head" {
            return Err(Error::Parse(format!("checkpoint: bad shape header {header:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("checkpoint: bad size {s:?}")));
        let head = match f[7] {
            "pair_softmax" => BinaryHead::PairSoftmax,
            "sigmoid" => BinaryHead::Sigmoid,
            other => return Err(Error::Parse(format!("checkpoint: unknown head {other:?}"))),
        };
        let mut model = Self::zeros(num(f[1])?, num(f[3])?, num(f[5])?, head)?;
        for (name, range, rows, cols) in model.layout.tensors() {
            let line = next(name)?;
            let mut it = line.split_whitespace();
            let got = (it.next(), it.next().map(num), it.next().map(num));
            match got {
                (Some(n), Some(Ok(r)), Some(Ok(c))) if n == name && r == rows && c == cols => {}
                _ => return Err(Error::Parse(format!("checkpoint: expected tensor {name} {rows}x{cols}"))),
            }
            let vals = it
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("checkpoint: bad value in {name}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != range.len() {
                return Err(Error::Parse(format!("checkpoint: {name} holds {} values, expected {}", vals.len(), range.len())));
            }
            model.params[range].copy_from_slice(&vals);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericFault("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(model: &mut ClassifierModel, grads: &[f64], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if grads.len() != model.params.len() || state.m.len() != grads.len() {
        return Err(Error::DimensionMismatch { expected: model.params.len(), got: grads.len() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

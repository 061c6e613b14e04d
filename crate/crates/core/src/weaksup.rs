//! Weak-supervision costs and losses.
//!
//! Costs are external feedback: the gradient of every loss here flows
//! only through hypothesis probabilities, never through the costs.
//!
//! The expected-cost loss is `sum_i p_hat_i * M_i` over an n-best list,
//! with `p_hat` the list-normalized probabilities. The policy-gradient
//! loss samples one hypothesis from `p_hat` and scores
//! `M' * log p_hat(y)`; using the list-normalized log-probability makes
//! the single-sample gradient estimator exactly unbiased for the
//! expected-cost gradient over the same list (the Monte Carlo tests pin
//! this down).

use crate::decoder::{normalize_nbest, Hypothesis, NBestList};
use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Gradient;
use crate::scalar::Real;
use crate::transducer::{FeatureSequence, TapeModel, TransducerModel};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Slot annotations (and optionally a reference transcript) attached to
/// an utterance as weak supervision.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WeakLabel {
    /// `(slot type, tokens of the filled value)`; token lists non-empty.
    pub slots: Vec<(String, Vec<u32>)>,
    /// Present only when the experiment uses transcript-based weak
    /// supervision (WER or sentence-error feedback).
    pub transcript: Option<Vec<u32>>,
}

/// Provenance of a feedback value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Semantic,
    BinarySer,
    Wer,
}

/// A scalar feedback value in `[0,1]` (binary costs stay in `[0,1]` even
/// after the sign-flipped noise term).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSignal<T> {
    pub cost: T,
    pub kind: CostKind,
    pub noisy: bool,
    pub sigma: f64,
}

/// Fraction of slots whose tokens are not all present in the hypothesis.
pub fn semantic_cost<T: Real>(hyp: &[u32], label: &WeakLabel) -> Result<T> {
    if label.slots.is_empty() {
        return Err(Error::MissingWeakField("slots"));
    }
    let mut errors = 0usize;
    for (_, tokens) in &label.slots {
        debug_assert!(!tokens.is_empty(), "slot token lists are non-empty");
        if !tokens.iter().all(|t| hyp.contains(t)) {
            errors += 1;
        }
    }
    Ok(T::from_f64_lossy(errors as f64 / label.slots.len() as f64))
}

/// Token-level Levenshtein distance (substitutions, insertions,
/// deletions all cost 1).
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hyp, reference) / len(reference)`.
pub fn wer_cost<T: Real>(hyp: &[u32], reference: &[u32]) -> Result<T> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("wer reference"));
    }
    Ok(T::from_f64_lossy(edit_distance(hyp, reference) as f64 / reference.len() as f64))
}

/// Sentence-error cost: 0 iff the hypothesis matches the transcript
/// exactly, else 1.
pub fn binary_ser_cost<T: Real>(hyp: &[u32], transcript: &[u32]) -> T {
    if hyp == transcript {
        T::zero()
    } else {
        T::one()
    }
}

/// Gaussian noise `N(0, sigma^2)` conditioned on `[0,1]`, applied to a
/// binary cost as `M' = M + (-1)^M * u`; the closed-form mean of the
/// truncation drives the expected-gradient attenuation `1 - 2*mean`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub sigma: f64,
    mean: f64,
}

fn normal_pdf(z: f64) -> f64 {
    (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
        }
        let mean = if sigma == 0.0 {
            0.0
        } else {
            // truncated-normal mean on [0, 1] for N(0, sigma^2)
            let beta = 1.0 / sigma;
            sigma * (normal_pdf(0.0) - normal_pdf(beta)) / (normal_cdf(beta) - 0.5)
        };
        Ok(NoiseModel { sigma, mean })
    }

    /// `E[U']`; must stay below 0.5 for the noisy gradient to keep the
    /// sign of the clean one.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Rejection-samples the truncated Gaussian (resample until the draw
    /// lands in `[0,1]`); sigma = 0 degenerates to 0.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        loop {
            let u = normal.sample(rng);
            if (0.0..=1.0).contains(&u) {
                return u;
            }
        }
    }
}

/// `M' = M + (-1)^M * u'` for a binary cost `M`; the result stays in
/// `[0,1]` by construction.
pub fn add_noise<T: Real>(cost: T, noise: &NoiseModel, rng: &mut impl Rng) -> T {
    debug_assert!(cost == T::zero() || cost == T::one(), "noise law assumes binary cost");
    let u = T::from_f64_lossy(noise.sample(rng));
    if cost == T::zero() {
        cost + u
    } else {
        cost - u
    }
}

/// A loss recorded on its own tape; call [`TracedLoss::backprop`] for the
/// exact gradient.
pub struct TracedLoss<T: Real> {
    pub tape: Tape<T>,
    pub loss: Var,
}

impl<T: Real> TracedLoss<T> {
    pub fn value(&self) -> T {
        self.tape.scalar(self.loss)
    }

    pub fn backprop(&self) -> Result<Gradient<T>> {
        self.tape.backprop(self.loss)
    }
}

/// Differentiable list-normalized log-probabilities for every hypothesis,
/// sharing one encoder pass.
pub fn normalized_log_probs_node<T: Real>(
    tape: &mut Tape<T>,
    tm: &TapeModel,
    enc: &[Var],
    nbest: &NBestList<T>,
) -> Result<Var> {
    if nbest.is_empty() {
        return Err(Error::EmptyInput("n-best list"));
    }
    let mut log_probs = Vec::with_capacity(nbest.len());
    for hyp in nbest.hyps() {
        log_probs.push(tm.log_prob_encoded(tape, enc, &hyp.tokens)?);
    }
    let stacked = tape.stack(&log_probs);
    Ok(tape.log_softmax(stacked))
}

/// Expected cost over the n-best under list-normalized probabilities;
/// the costs enter as constants.
pub fn expected_cost_node<T: Real>(
    tape: &mut Tape<T>,
    tm: &TapeModel,
    enc: &[Var],
    nbest: &NBestList<T>,
    costs: &[T],
) -> Result<Var> {
    let log_norm = normalized_log_probs_node(tape, tm, enc, nbest)?;
    let probs = tape.exp(log_norm);
    Ok(tape.dot_const(probs, costs.to_vec()))
}

/// Policy-gradient term for one sampled hypothesis:
/// `reward * log p_hat(y_idx)` with the reward held constant.
pub fn reinforce_node<T: Real>(
    tape: &mut Tape<T>,
    tm: &TapeModel,
    enc: &[Var],
    nbest: &NBestList<T>,
    sampled_idx: usize,
    reward: T,
) -> Result<Var> {
    let log_norm = normalized_log_probs_node(tape, tm, enc, nbest)?;
    let picked = tape.index(log_norm, sampled_idx);
    Ok(tape.affine(picked, reward, T::zero()))
}

/// Plain expectation helper used for reporting and tests.
pub fn expected_cost<T: Real>(weights: &[T], costs: &[T]) -> T {
    weights.iter().zip(costs).map(|(&w, &c)| w * c).sum()
}

/// Standalone expected-cost loss on a fresh tape.
pub fn expected_cost_loss<T: Real>(
    model: &TransducerModel<T>,
    x: &FeatureSequence<T>,
    nbest: &NBestList<T>,
    costs: &[T],
) -> Result<TracedLoss<T>> {
    if nbest.is_empty() {
        return Err(Error::EmptyInput("n-best list"));
    }
    if costs.len() != nbest.len() {
        return Err(Error::DimMismatch("one cost per hypothesis".into()));
    }
    let mut tape = Tape::new(&model.params);
    let tm = TapeModel::new(&mut tape, model.dims);
    let enc = tm.encode(&mut tape, x)?;
    let loss = expected_cost_node(&mut tape, &tm, &enc, nbest, costs)?;
    Ok(TracedLoss { tape, loss })
}

/// Samples an action from the list-normalized distribution (or takes the
/// served top-1 when `served_only`), queries feedback for that hypothesis
/// alone, and returns the traced policy-gradient loss plus the index
/// used.
pub fn reinforce_loss<T: Real>(
    model: &TransducerModel<T>,
    x: &FeatureSequence<T>,
    nbest: &NBestList<T>,
    feedback: impl FnOnce(&Hypothesis<T>) -> FeedbackSignal<T>,
    served_only: bool,
    rng: &mut impl Rng,
) -> Result<(TracedLoss<T>, usize)> {
    if nbest.is_empty() {
        return Err(Error::EmptyInput("n-best list"));
    }
    let idx = if served_only { 0 } else { sample_index(&normalize_nbest(nbest), rng) };
    let signal = feedback(&nbest.hyps()[idx]);
    let mut tape = Tape::new(&model.params);
    let tm = TapeModel::new(&mut tape, model.dims);
    let enc = tm.encode(&mut tape, x)?;
    let loss = reinforce_node(&mut tape, &tm, &enc, nbest, idx, signal.cost)?;
    Ok((TracedLoss { tape, loss }, idx))
}

/// Draws an index proportionally to `weights` (assumed to sum to 1).
pub fn sample_index<T: Real>(weights: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w.to_f64().unwrap_or(0.0);
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

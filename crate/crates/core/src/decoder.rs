//! Beam search over the transducer with exact n-best rescoring, plus the
//! confidence filter used for pseudo-labeling.
//!
//! Search keeps per-prefix path mass (merging duplicate prefixes with
//! logaddexp) and allows a bounded number of label emissions per frame.
//! Survivors are rescored with the exact lattice log-probability, because
//! downstream weak-supervision losses differentiate through those scores;
//! the approximate beam score is used only to steer the search.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transducer::{FeatureSequence, TransducerModel, BLANK};
use std::collections::HashMap;

/// One decoded candidate. `served` marks the hypothesis shown to the
/// user: exactly the top entry of an n-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    pub tokens: Vec<u32>,
    pub log_prob: T,
    pub served: bool,
}

/// Hypotheses ordered by descending rescored log-probability, ties broken
/// lexicographically on token ids; no duplicate token sequences.
#[derive(Debug, Clone)]
pub struct NBestList<T> {
    hyps: Vec<Hypothesis<T>>,
}

impl<T: Real> NBestList<T> {
    pub fn hyps(&self) -> &[Hypothesis<T>] {
        &self.hyps
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn top(&self) -> &Hypothesis<T> {
        &self.hyps[0]
    }

    /// Builds a list from scored candidates: sorts, dedupes, truncates to
    /// `m`, and marks the top hypothesis as served.
    pub fn from_candidates(mut cands: Vec<(Vec<u32>, T)>, m: usize) -> Result<Self> {
        if cands.is_empty() {
            return Err(Error::EmptyInput("n-best candidates"));
        }
        cands.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        cands.dedup_by(|a, b| a.0 == b.0);
        cands.truncate(m);
        let hyps = cands
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, log_prob))| Hypothesis { tokens, log_prob, served: i == 0 })
            .collect();
        Ok(NBestList { hyps })
    }
}

/// Beam search controls.
#[derive(Debug, Clone, Copy)]
pub struct BeamConfig {
    pub beam: usize,
    pub nbest: usize,
    /// Cap on label emissions within one frame.
    pub max_symbols_per_frame: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 8, nbest: 4, max_symbols_per_frame: 3 }
    }
}

struct BeamHyp<T> {
    tokens: Vec<u32>,
    score: T,
}

/// Time-synchronous beam search returning the `m` best distinct label
/// sequences, each scored by its exact lattice log-probability.
pub fn beam_decode<T: Real>(
    model: &TransducerModel<T>,
    x: &FeatureSequence<T>,
    cfg: &BeamConfig,
) -> Result<NBestList<T>> {
    if cfg.nbest == 0 || cfg.beam < cfg.nbest {
        return Err(Error::Config(format!(
            "beam {} must be >= nbest {} >= 1",
            cfg.beam, cfg.nbest
        )));
    }
    let enc = model.encode(x)?;
    let start = model.pred_start();
    // prediction state is a pure function of the token prefix, so states
    // are cached across frames and duplicate-prefix merges are exact
    let mut pred_cache: HashMap<Vec<u32>, crate::transducer::PredState<T>> = HashMap::new();
    pred_cache.insert(Vec::new(), start);
    let mut scratch = model.joint_scratch();
    let mut lp = vec![T::zero(); model.dims.alphabet()];

    let mut beams = vec![BeamHyp { tokens: Vec::new(), score: T::zero() }];

    for ep in &enc {
        // key: token prefix; value: index into `carried` for blank mass
        let mut carried: Vec<BeamHyp<T>> = Vec::new();
        let mut carried_idx: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut frontier = beams;

        for depth in 0..=cfg.max_symbols_per_frame {
            // score every expansion first; prediction states are computed
            // only for pruning survivors
            let mut cands: Vec<(T, usize, u32)> = Vec::new();
            for (parent, hyp) in frontier.iter().enumerate() {
                let proj = &pred_cache[&hyp.tokens].proj;
                model.joint_log_probs_into(ep, proj, &mut scratch, &mut lp);
                let blank_score = hyp.score + lp[BLANK as usize];
                match carried_idx.get(&hyp.tokens) {
                    Some(&i) => {
                        carried[i].score =
                            crate::numerics::kernels::logaddexp(carried[i].score, blank_score)
                    }
                    None => {
                        carried_idx.insert(hyp.tokens.clone(), carried.len());
                        carried.push(BeamHyp { tokens: hyp.tokens.clone(), score: blank_score });
                    }
                }
                if depth == cfg.max_symbols_per_frame {
                    continue;
                }
                for (k, &score) in lp.iter().enumerate().skip(1) {
                    cands.push((hyp.score + score, parent, k as u32));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(&b.2))
            });
            cands.truncate(cfg.beam);

            let mut expansions: Vec<BeamHyp<T>> = Vec::new();
            let mut expansion_idx: HashMap<Vec<u32>, usize> = HashMap::new();
            for (score, parent, label) in cands {
                let parent_tokens = &frontier[parent].tokens;
                let mut tokens = parent_tokens.clone();
                tokens.push(label);
                match expansion_idx.get(&tokens) {
                    Some(&i) => {
                        expansions[i].score =
                            crate::numerics::kernels::logaddexp(expansions[i].score, score)
                    }
                    None => {
                        if !pred_cache.contains_key(&tokens) {
                            let next = model.pred_step(&pred_cache[parent_tokens], label);
                            pred_cache.insert(tokens.clone(), next);
                        }
                        expansion_idx.insert(tokens.clone(), expansions.len());
                        expansions.push(BeamHyp { tokens, score });
                    }
                }
            }
            frontier = expansions;
            if frontier.is_empty() {
                break;
            }
        }
        prune(&mut carried, cfg.beam);
        beams = carried;
    }

    let rescored: Result<Vec<(Vec<u32>, T)>> = beams
        .into_iter()
        .map(|h| {
            let lp = model.posterior_log_prob(x, &h.tokens)?;
            Ok((h.tokens, lp))
        })
        .collect();
    NBestList::from_candidates(rescored?, cfg.nbest)
}

fn prune<T: Real>(hyps: &mut Vec<BeamHyp<T>>, beam: usize) {
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    hyps.truncate(beam);
}

/// Weights `exp(log_prob_i) / sum_j exp(log_prob_j)` over the list,
/// computed through logsumexp.
pub fn normalize_nbest<T: Real>(nbest: &NBestList<T>) -> Vec<T> {
    let scores: Vec<T> = nbest.hyps().iter().map(|h| h.log_prob).collect();
    let mut out = vec![T::zero(); scores.len()];
    crate::numerics::kernels::log_softmax(&scores, &mut out);
    for v in &mut out {
        *v = v.exp();
    }
    out
}

/// Inclusive confidence band on the top normalized probability.
#[derive(Debug, Clone, Copy)]
pub struct FilterBand {
    pub low: f64,
    pub high: f64,
    /// When set, confidence is the per-token geometric mean of the top
    /// normalized probability instead of the raw value.
    pub length_normalized: bool,
}

impl FilterBand {
    pub fn new(low: f64, high: f64, length_normalized: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&low) || high <= low || high > 1.0 {
            return Err(Error::InvalidThresholds { low, high });
        }
        Ok(FilterBand { low, high, length_normalized })
    }
}

/// Accepts an utterance for pseudo-labeling iff the top hypothesis'
/// confidence lies inside `[low, high]`.
pub fn confidence_filter<T: Real>(nbest: &NBestList<T>, band: &FilterBand) -> bool {
    let weights = normalize_nbest(nbest);
    let mut conf = weights[0].to_f64().unwrap_or(0.0);
    if band.length_normalized {
        let len = nbest.top().tokens.len().max(1) as f64;
        conf = conf.powf(1.0 / len);
    }
    conf >= band.low && conf <= band.high
}

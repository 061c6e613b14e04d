//! Evaluation: corpus-level WER/SER/semantic cost, relative WER reduction
//! against the run's initial model, catastrophic-forgetting summaries,
//! and the divergence detector.

use crate::corpus::{Corpus, Utterance};
use crate::decoder::{beam_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transducer::{FeatureSequence, TransducerModel};
use crate::weaksup::{binary_ser_cost, edit_distance, semantic_cost, WeakLabel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Anything that turns features into a token hypothesis. The production
/// implementation decodes with the model; tests may substitute oracles.
pub trait Recognizer: Sync {
    fn transcribe(&self, features: &FeatureSequence<Scalar>) -> Result<Vec<u32>>;
}

/// Beam-decode top-1 of the model.
pub struct ModelRecognizer<'a> {
    pub model: &'a TransducerModel<Scalar>,
    pub beam: BeamConfig,
}

impl Recognizer for ModelRecognizer<'_> {
    fn transcribe(&self, features: &FeatureSequence<Scalar>) -> Result<Vec<u32>> {
        Ok(beam_decode(self.model, features, &self.beam)?.top().tokens.clone())
    }
}

/// Aggregate metrics over one eval set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    /// Total edit distance / total reference tokens.
    pub wer: f64,
    /// Mean binary sentence-error cost.
    pub ser: f64,
    /// Mean slot semantic cost.
    pub semantic_cost: f64,
    pub edit_distance: u64,
    pub ref_tokens: u64,
    pub utterances: u64,
}

/// Decodes every utterance (parallel, order-independent) and aggregates
/// token-level WER, SER, and semantic cost.
pub fn evaluate_set(
    rec: &impl Recognizer,
    corpus: &Corpus,
    set: &[Utterance],
) -> Result<SetMetrics> {
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let per_utt: Result<Vec<(u64, u64, f64, f64)>> = set
        .par_iter()
        .map(|utt| {
            let features = corpus.features_for(utt)?;
            let hyp = rec.transcribe(&features)?;
            let dist = edit_distance(&hyp, &utt.tokens) as u64;
            let ser: f64 = binary_ser_cost(&hyp, &utt.tokens);
            let label = WeakLabel { slots: utt.slots.clone(), transcript: None };
            let sem: f64 = semantic_cost(&hyp, &label)?;
            Ok((dist, utt.tokens.len() as u64, ser, sem))
        })
        .collect();
    let per_utt = per_utt?;
    let edit: u64 = per_utt.iter().map(|r| r.0).sum();
    let refs: u64 = per_utt.iter().map(|r| r.1).sum();
    let ser: f64 = per_utt.iter().map(|r| r.2).sum::<f64>() / set.len() as f64;
    let sem: f64 = per_utt.iter().map(|r| r.3).sum::<f64>() / set.len() as f64;
    Ok(SetMetrics {
        wer: edit as f64 / refs as f64,
        ser,
        semantic_cost: sem,
        edit_distance: edit,
        ref_tokens: refs,
        utterances: set.len() as u64,
    })
}

/// `corpus_wer` convenience over [`evaluate_set`].
pub fn corpus_wer(rec: &impl Recognizer, corpus: &Corpus, set: &[Utterance]) -> Result<f64> {
    Ok(evaluate_set(rec, corpus, set)?.wer)
}

/// Relative WER reduction versus the initial model; positive values are
/// improvements.
pub fn werr(initial_wer: f64, current_wer: f64) -> Result<f64> {
    if initial_wer <= 0.0 {
        return Err(Error::Config("werr undefined for zero initial WER".into()));
    }
    Ok((initial_wer - current_wer) / initial_wer)
}

/// Metrics plus WERR for one set at one evaluation round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetEval {
    pub wer: f64,
    pub ser: f64,
    pub semantic_cost: f64,
    pub werr: f64,
}

impl SetEval {
    fn from_metrics(m: &SetMetrics, initial_wer: f64) -> Result<Self> {
        Ok(SetEval {
            wer: m.wer,
            ser: m.ser,
            semantic_cost: m.semantic_cost,
            werr: werr(initial_wer, m.wer)?,
        })
    }
}

/// Per-round evaluation snapshot over the three eval sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub round: u64,
    pub general_old: SetEval,
    pub general_new: SetEval,
    pub delta: SetEval,
}

impl EvalSnapshot {
    /// Builds a snapshot; `initial` carries the run-initial WERs the WERR
    /// baseline is fixed to (the snapshot at round 0 passes itself).
    pub fn build(
        round: u64,
        general_old: &SetMetrics,
        general_new: &SetMetrics,
        delta: &SetMetrics,
        initial: Option<&EvalSnapshot>,
    ) -> Result<Self> {
        let base = |f: fn(&EvalSnapshot) -> f64, own: &SetMetrics| -> f64 {
            initial.map(f).unwrap_or(own.wer)
        };
        Ok(EvalSnapshot {
            round,
            general_old: SetEval::from_metrics(
                general_old,
                base(|s| s.general_old.wer, general_old),
            )?,
            general_new: SetEval::from_metrics(
                general_new,
                base(|s| s.general_new.wer, general_new),
            )?,
            delta: SetEval::from_metrics(delta, base(|s| s.delta.wer, delta))?,
        })
    }
}

/// Flags catastrophic forgetting: the old set degrades past a threshold
/// while the delta set improves past it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub old_werr_final: f64,
    pub delta_werr_final: f64,
    pub flagged: bool,
    pub threshold: f64,
}

pub fn forgetting_report(snapshots: &[EvalSnapshot], threshold: f64) -> Result<ForgettingReport> {
    if snapshots.len() < 2 {
        return Err(Error::Config("forgetting report needs at least two snapshots".into()));
    }
    let last = snapshots.last().unwrap();
    let old = last.general_old.werr;
    let delta = last.delta.werr;
    Ok(ForgettingReport {
        old_werr_final: old,
        delta_werr_final: delta,
        flagged: old < -threshold && delta > threshold,
        threshold,
    })
}

/// Rehearsal versus plain self-learning: how much old-set degradation was
/// removed and how much of the delta-set gain survived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RehearsalComparison {
    /// Fraction of the old-set WERR degradation removed by rehearsal
    /// (1 = fully removed, 0 = unchanged, negative = worse).
    pub degradation_reduction: f64,
    /// Rehearsal delta-set WERR as a fraction of the no-rehearsal gain.
    pub delta_gain_retention: f64,
}

pub fn compare_rehearsal(
    without: &ForgettingReport,
    with: &ForgettingReport,
) -> RehearsalComparison {
    let degradation_without = (-without.old_werr_final).max(0.0);
    let degradation_with = (-with.old_werr_final).max(0.0);
    let degradation_reduction = if degradation_without > 0.0 {
        (degradation_without - degradation_with) / degradation_without
    } else {
        0.0
    };
    let delta_gain_retention = if without.delta_werr_final > 0.0 {
        with.delta_werr_final / without.delta_werr_final
    } else {
        0.0
    };
    RehearsalComparison { degradation_reduction, delta_gain_retention }
}

/// Divergence detector: relative WER degradation on the new general set
/// at or past `rel_threshold` for `consecutive` successive snapshots.
/// Returns the round at which the streak completes.
pub fn detect_divergence(
    snapshots: &[EvalSnapshot],
    rel_threshold: f64,
    consecutive: usize,
) -> Option<u64> {
    let mut streak = 0;
    for s in snapshots {
        // WERR of -x means x relative degradation
        if s.general_new.werr <= -rel_threshold {
            streak += 1;
            if streak >= consecutive {
                return Some(s.round);
            }
        } else {
            streak = 0;
        }
    }
    None
}

/// Delimited summary mirroring the per-set result tables: one row per
/// eval set with initial/final WER and WERR.
pub fn summary_table(initial: &EvalSnapshot, fin: &EvalSnapshot) -> String {
    let mut out = String::from("set\tinitial_wer\tfinal_wer\twerr\tser\tsemantic_cost\n");
    for (name, i, f) in [
        ("general_old", &initial.general_old, &fin.general_old),
        ("general_new", &initial.general_new, &fin.general_new),
        ("delta", &initial.delta, &fin.delta),
    ] {
        out.push_str(&format!(
            "{name}\t{:.6}\t{:.6}\t{:+.6}\t{:.6}\t{:.6}\n",
            i.wer, f.wer, f.werr, f.ser, f.semantic_cost
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::weaksup::wer_cost;

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            pretrain_utterances: 30,
            rehearsal_utterances: 10,
            eval_utterances_per_set: 25,
            population_devices: 2,
            device_stream_len: 10,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    /// Looks the answer up from the ground truth: a perfect recognizer.
    struct OracleRecognizer {
        table: Vec<(FeatureSequence<Scalar>, Vec<u32>)>,
    }

    impl Recognizer for OracleRecognizer {
        fn transcribe(&self, features: &FeatureSequence<Scalar>) -> Result<Vec<u32>> {
            Ok(self
                .table
                .iter()
                .find(|(f, _)| f == features)
                .map(|(_, t)| t.clone())
                .unwrap_or_default())
        }
    }

    /// Emits nothing, ever.
    struct BlankRecognizer;

    impl Recognizer for BlankRecognizer {
        fn transcribe(&self, _features: &FeatureSequence<Scalar>) -> Result<Vec<u32>> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn oracle_recognizer_scores_zero_wer() {
        let corpus = tiny_corpus();
        let set = corpus.eval_general_old.clone();
        let table = set
            .iter()
            .map(|u| (corpus.features_for(u).unwrap(), u.tokens.clone()))
            .collect();
        let m = evaluate_set(&OracleRecognizer { table }, &corpus, &set).unwrap();
        assert_eq!(m.wer, 0.0);
        assert_eq!(m.ser, 0.0);
        assert_eq!(m.semantic_cost, 0.0);
    }

    #[test]
    fn blank_recognizer_scores_full_deletions() {
        let corpus = tiny_corpus();
        let m = evaluate_set(&BlankRecognizer, &corpus, &corpus.eval_delta).unwrap();
        assert_eq!(m.wer, 1.0);
        assert_eq!(m.ser, 1.0);
        assert_eq!(m.semantic_cost, 1.0);
    }

    /// Corrupts the first token of every truth.
    struct CorruptingRecognizer {
        table: Vec<(FeatureSequence<Scalar>, Vec<u32>)>,
    }

    impl Recognizer for CorruptingRecognizer {
        fn transcribe(&self, features: &FeatureSequence<Scalar>) -> Result<Vec<u32>> {
            let mut t = self
                .table
                .iter()
                .find(|(f, _)| f == features)
                .map(|(_, t)| t.clone())
                .unwrap_or_default();
            if !t.is_empty() {
                t[0] = if t[0] == 1 { 2 } else { 1 };
            }
            Ok(t)
        }
    }

    #[test]
    fn corpus_wer_matches_per_utterance_weighted_costs() {
        let corpus = tiny_corpus();
        let set = corpus.eval_general_new.clone();
        let table: Vec<_> = set
            .iter()
            .map(|u| (corpus.features_for(u).unwrap(), u.tokens.clone()))
            .collect();
        let rec = CorruptingRecognizer { table };
        let aggregate = corpus_wer(&rec, &corpus, &set).unwrap();
        let mut weighted = 0.0;
        let mut total = 0.0;
        for u in &set {
            let hyp = rec.transcribe(&corpus.features_for(u).unwrap()).unwrap();
            let c: f64 = wer_cost(&hyp, &u.tokens).unwrap();
            weighted += c * u.tokens.len() as f64;
            total += u.tokens.len() as f64;
        }
        assert!((aggregate - weighted / total).abs() < 1e-12);
        assert!(aggregate > 0.0);
    }

    #[test]
    fn werr_arithmetic() {
        assert_eq!(werr(0.2, 0.2).unwrap(), 0.0);
        assert!((werr(0.2, 0.18).unwrap() - 0.10).abs() < 1e-12);
        assert!((werr(0.2, 0.22).unwrap() - (-0.10)).abs() < 1e-12);
        assert!(werr(0.0, 0.1).is_err());
    }

    fn snap(round: u64, old_werr: f64, new_werr: f64, delta_werr: f64) -> EvalSnapshot {
        let set = |werr: f64| SetEval { wer: 0.2 * (1.0 - werr), ser: 0.3, semantic_cost: 0.1, werr };
        EvalSnapshot {
            round,
            general_old: set(old_werr),
            general_new: set(new_werr),
            delta: set(delta_werr),
        }
    }

    #[test]
    fn forgetting_flags_degradation_with_delta_gain() {
        // flat run: nothing flagged
        let flat = vec![snap(0, 0.0, 0.0, 0.0), snap(10, 0.001, 0.0, 0.002)];
        assert!(!forgetting_report(&flat, 0.05).unwrap().flagged);

        // self-learning-shaped run: old degrades, delta improves
        let run = vec![snap(0, 0.0, 0.0, 0.0), snap(10, -0.1363, -0.05, 0.1408)];
        let report = forgetting_report(&run, 0.05).unwrap();
        assert!(report.flagged);

        // rehearsal-shaped run: degradation reduced, most gain kept
        let rehearsal = vec![snap(0, 0.0, 0.0, 0.0), snap(10, -0.0585, -0.03, 0.1247)];
        let cmp = compare_rehearsal(&report, &forgetting_report(&rehearsal, 0.05).unwrap());
        assert!(cmp.degradation_reduction > 0.3, "{}", cmp.degradation_reduction);
        assert!(cmp.delta_gain_retention > 0.6, "{}", cmp.delta_gain_retention);
    }

    #[test]
    fn divergence_needs_sustained_degradation() {
        let stable = vec![
            snap(0, 0.0, 0.0, 0.0),
            snap(10, 0.0, -0.25, 0.0),
            snap(20, 0.0, -0.05, 0.0),
            snap(30, 0.0, -0.25, 0.0),
            snap(40, 0.0, -0.22, 0.0),
        ];
        assert_eq!(detect_divergence(&stable, 0.2, 3), None);

        let diverging = vec![
            snap(0, 0.0, 0.0, 0.0),
            snap(10, 0.0, -0.21, 0.0),
            snap(20, 0.0, -0.30, 0.0),
            snap(30, 0.0, -0.45, 0.0),
        ];
        assert_eq!(detect_divergence(&diverging, 0.2, 3), Some(30));
    }

    #[test]
    fn summary_table_has_one_row_per_set() {
        let initial = snap(0, 0.0, 0.0, 0.0);
        let fin = snap(100, -0.05, 0.01, 0.12);
        let table = summary_table(&initial, &fin);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("delta\t"));
    }
}

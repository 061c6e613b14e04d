//! Federated self-learning rounds: device sampling, broadcast, local
//! training with teacher pseudo-labels and optional weak supervision,
//! rehearsal pseudo-devices, delta aggregation, the server optimizer,
//! and the EMA teacher schedule.
//!
//! Privacy boundaries are architectural: [`local_train`] only ever
//! receives [`DeviceUtterance`] values, a type with no ground-truth token
//! field; raw features never reach the server side, which sees deltas
//! alone. Every stochastic choice derives its RNG from
//! `(run seed, round, device)` so results are independent of device
//! execution order.

use crate::config::{EmaMode, ExperimentConfig, ServerOptimizer, WeakMode};
use crate::corpus::{augment, Corpus, DeviceUtterance, Utterance, WeakView};
use crate::decoder::{beam_decode, confidence_filter, normalize_nbest, BeamConfig, FilterBand};
use crate::error::{Error, Result};
use crate::eval::{detect_divergence, evaluate_set, EvalSnapshot, ModelRecognizer};
use crate::numerics::tape::Tape;
use crate::numerics::{
    load_checkpoint, save_checkpoint, Gradient, OptimizerState, ParamVector, Role,
};
use crate::rng::{derive_rng, TAG_DEVICE, TAG_INIT, TAG_PRETRAIN, TAG_SAMPLING};
use crate::scalar::Scalar;
use crate::transducer::{FeatureSequence, ModelDims, TapeModel, TransducerModel};
use crate::weaksup::{
    add_noise, binary_ser_cost, expected_cost_node, reinforce_node, sample_index, semantic_cost,
    wer_cost, NoiseModel, WeakLabel,
};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

type Params = ParamVector<Scalar>;
type Grad = Gradient<Scalar>;

/// Per-round record; one line of the report stream. Evaluation snapshots
/// ride along on their cadence rounds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub devices: usize,
    pub pseudo_devices: usize,
    pub accepted: u64,
    pub rejected: u64,
    pub mean_self_loss: Option<f64>,
    pub mean_weak_loss: Option<f64>,
    pub mean_rehearsal_loss: Option<f64>,
    /// L2 norm of the aggregated pseudo-gradient fed to the server
    /// optimizer.
    pub delta_norm: f64,
    pub teacher_updated: bool,
    pub diverged: bool,
    pub eval: Option<EvalSnapshot>,
}

/// Server-side state: global and teacher parameters plus the optimizer.
#[derive(Debug)]
pub struct ServerState {
    pub global: Params,
    pub teacher: Params,
    pub optimizer: OptimizerState<Scalar>,
    pub round: u64,
}

impl ServerState {
    /// Teacher starts as a copy of the pre-trained global model.
    pub fn new(cfg: &ExperimentConfig, init: Params) -> Self {
        let optimizer = match cfg.federation.server_optimizer {
            ServerOptimizer::Sgd => OptimizerState::sgd(cfg.federation.server_lr),
            ServerOptimizer::Adam => {
                OptimizerState::adam(cfg.federation.server_lr, init.layout().clone())
            }
        };
        ServerState { teacher: init.clone(), global: init, optimizer, round: 0 }
    }
}

/// Element-wise `rate * teacher + (1 - rate) * student` when
/// `round % every == 0`, otherwise the teacher unchanged.
pub fn ema_update(
    teacher: &Params,
    student: &Params,
    rate: f64,
    round: u64,
    every: u64,
) -> Result<Params> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidEmaRate(rate));
    }
    if every == 0 {
        return Err(Error::Config("ema update frequency must be positive".into()));
    }
    if round % every == 0 {
        teacher.blend(student, rate)
    } else {
        Ok(teacher.clone())
    }
}

/// Outcome of one device's (or pseudo-device's) local pass.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// `w_final - w_start` in gradient layout.
    pub delta: Grad,
    pub accepted: u64,
    pub rejected: u64,
    pub self_loss_sum: f64,
    pub self_loss_count: u64,
    pub weak_loss_sum: f64,
    pub weak_loss_count: u64,
}

/// One utterance prepared for gradient steps: a training label (pseudo or
/// ground truth), the clean features, and any weak-supervision label.
struct TrainItem {
    features: FeatureSequence<Scalar>,
    label: Vec<u32>,
    weak: Option<WeakLabel>,
}

struct StepStats {
    self_loss_sum: f64,
    self_loss_count: u64,
    weak_loss_sum: f64,
    weak_loss_count: u64,
}

/// Slice of the experiment config a local pass needs.
#[derive(Debug, Clone)]
pub struct LocalSpec {
    pub dims: ModelDims,
    pub local_steps: usize,
    pub batch_size: usize,
    pub device_lr: f64,
    pub self_label: bool,
    pub weak_mode: WeakMode,
    pub weak_weight: f64,
    pub served_only: bool,
    pub noise: NoiseModel,
    pub beam: BeamConfig,
    pub filter: FilterBand,
    pub augment: crate::corpus::AugmentConfig,
}

impl LocalSpec {
    pub fn from_config(cfg: &ExperimentConfig, dims: ModelDims) -> Result<Self> {
        Ok(LocalSpec {
            dims,
            local_steps: cfg.federation.local_steps,
            batch_size: cfg.federation.batch_size,
            device_lr: cfg.federation.device_lr,
            self_label: cfg.federation.self_label,
            weak_mode: cfg.weaksup.mode,
            weak_weight: cfg.weaksup.weight,
            served_only: cfg.weaksup.served_only,
            noise: NoiseModel::new(cfg.weaksup.noise_sigma)?,
            beam: cfg.beam_config(),
            filter: cfg.filter_band()?,
            augment: cfg.augment,
        })
    }

    /// Which weak-label fields the device view must expose.
    pub fn weak_view(&self) -> WeakView {
        match self.weak_mode {
            WeakMode::Off => WeakView::None,
            WeakMode::ExpectedSemantic | WeakMode::ReinforceSemantic => WeakView::Slots,
            WeakMode::ExpectedSemanticPlusWer | WeakMode::ReinforceBinary => {
                WeakView::SlotsAndTranscript
            }
        }
    }
}

/// SGD steps over prepared batches; shared by device and rehearsal paths.
fn run_local_steps(
    spec: &LocalSpec,
    w_start: &Params,
    batches: Vec<Vec<TrainItem>>,
    use_weak: bool,
    rng: &mut ChaCha8Rng,
    stats: &mut StepStats,
) -> Result<Params> {
    let mut w = w_start.clone();
    let mut opt = OptimizerState::sgd(spec.device_lr);
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        let model = TransducerModel::with_params(spec.dims, w.clone())?;
        let mut grad_sum = Gradient::zeros(w.layout().clone());
        for item in &batch {
            let mut tape = Tape::new(&w);
            let tm = TapeModel::new(&mut tape, spec.dims);
            let mut terms = Vec::new();

            if spec.self_label {
                let augmented = augment(&item.features, &spec.augment, rng);
                let self_loss = tm.loss(&mut tape, &augmented, &item.label)?;
                stats.self_loss_sum += tape.scalar(self_loss);
                stats.self_loss_count += 1;
                terms.push(self_loss);
            }

            if use_weak && spec.weak_mode != WeakMode::Off {
                if let Some(weak) = &item.weak {
                    let nbest = beam_decode(&model, &item.features, &spec.beam)?;
                    let enc = tm.encode(&mut tape, &item.features)?;
                    let weak_var = match spec.weak_mode {
                        WeakMode::Off => unreachable!(),
                        WeakMode::ExpectedSemantic | WeakMode::ExpectedSemanticPlusWer => {
                            let mut costs = Vec::with_capacity(nbest.len());
                            for hyp in nbest.hyps() {
                                let mut c: Scalar = semantic_cost(&hyp.tokens, weak)?;
                                if spec.weak_mode == WeakMode::ExpectedSemanticPlusWer {
                                    let transcript = weak
                                        .transcript
                                        .as_ref()
                                        .ok_or(Error::MissingWeakField("transcript"))?;
                                    c = c + wer_cost::<Scalar>(&hyp.tokens, transcript)?;
                                }
                                costs.push(c);
                            }
                            expected_cost_node(&mut tape, &tm, &enc, &nbest, &costs)?
                        }
                        WeakMode::ReinforceSemantic | WeakMode::ReinforceBinary => {
                            let idx = if spec.served_only {
                                0
                            } else {
                                sample_index(&normalize_nbest(&nbest), rng)
                            };
                            let chosen = &nbest.hyps()[idx];
                            let reward = match spec.weak_mode {
                                WeakMode::ReinforceSemantic => {
                                    semantic_cost::<Scalar>(&chosen.tokens, weak)?
                                }
                                _ => {
                                    let transcript = weak
                                        .transcript
                                        .as_ref()
                                        .ok_or(Error::MissingWeakField("transcript"))?;
                                    let raw = binary_ser_cost::<Scalar>(&chosen.tokens, transcript);
                                    add_noise(raw, &spec.noise, rng)
                                }
                            };
                            reinforce_node(&mut tape, &tm, &enc, &nbest, idx, reward)?
                        }
                    };
                    let weighted = tape.affine(weak_var, spec.weak_weight, 0.0);
                    stats.weak_loss_sum += tape.scalar(weighted);
                    stats.weak_loss_count += 1;
                    terms.push(weighted);
                }
            }

            let Some(mut total) = terms.first().copied() else { continue };
            for t in &terms[1..] {
                total = tape.add(total, *t);
            }
            let scaled = tape.affine(total, 1.0 / batch.len() as f64, 0.0);
            grad_sum.add_assign(&tape.backprop(scaled)?)?;
        }
        w = crate::numerics::sgd_step(&mut opt, &w, &grad_sum)?;
    }
    Ok(w)
}

/// One device's round: the teacher labels clean audio (confidence
/// filtered), the student trains on augmented audio against the pseudo
/// label plus any weak-supervision loss, and only the parameter delta
/// leaves the device.
pub fn local_train(
    spec: &LocalSpec,
    items: &[DeviceUtterance],
    w_start: &Params,
    teacher: &Params,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    let teacher_model = TransducerModel::with_params(spec.dims, teacher.clone())?;
    let mut stats = StepStats {
        self_loss_sum: 0.0,
        self_loss_count: 0,
        weak_loss_sum: 0.0,
        weak_loss_count: 0,
    };
    let mut accepted = 0u64;
    let mut rejected = 0u64;

    let mut batches = Vec::new();
    let mut iter = items.iter();
    for _ in 0..spec.local_steps {
        let mut batch = Vec::new();
        for _ in 0..spec.batch_size {
            let Some(item) = iter.next() else { break };
            if spec.self_label {
                // teacher transcribes the clean features
                let nbest = beam_decode(&teacher_model, &item.features, &spec.beam)?;
                if !confidence_filter(&nbest, &spec.filter) {
                    rejected += 1;
                    continue;
                }
                accepted += 1;
                batch.push(TrainItem {
                    features: item.features.clone(),
                    label: nbest.top().tokens.clone(),
                    weak: item.weak.clone(),
                });
            } else {
                // weak-supervision-only training: no pseudo-labels, no
                // confidence filter; every utterance contributes
                accepted += 1;
                batch.push(TrainItem {
                    features: item.features.clone(),
                    label: Vec::new(),
                    weak: item.weak.clone(),
                });
            }
        }
        batches.push(batch);
    }

    let w_final = run_local_steps(spec, w_start, batches, true, rng, &mut stats)?;
    Ok(LocalOutcome {
        delta: w_final.delta_from(w_start)?,
        accepted,
        rejected,
        self_loss_sum: stats.self_loss_sum,
        self_loss_count: stats.self_loss_count,
        weak_loss_sum: stats.weak_loss_sum,
        weak_loss_count: stats.weak_loss_count,
    })
}

/// Cloud pseudo-device round: the same local step machinery with ground
/// truth transcriptions in place of teacher labels and no weak loss.
pub fn rehearsal_train(
    spec: &LocalSpec,
    corpus: &Corpus,
    utterances: &[&Utterance],
    w_start: &Params,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    if utterances.is_empty() {
        return Err(Error::EmptyInput("rehearsal batch"));
    }
    let mut stats = StepStats {
        self_loss_sum: 0.0,
        self_loss_count: 0,
        weak_loss_sum: 0.0,
        weak_loss_count: 0,
    };
    let supervised = LocalSpec { self_label: true, ..spec.clone() };
    let mut batches = Vec::new();
    let mut iter = utterances.iter();
    for _ in 0..spec.local_steps {
        let mut batch = Vec::new();
        for _ in 0..spec.batch_size {
            let Some(utt) = iter.next() else { break };
            batch.push(TrainItem {
                features: corpus.features_for(utt)?,
                label: utt.tokens.clone(),
                weak: None,
            });
        }
        batches.push(batch);
    }
    let n: u64 = batches.iter().map(|b| b.len() as u64).sum();
    let w_final = run_local_steps(&supervised, w_start, batches, false, rng, &mut stats)?;
    Ok(LocalOutcome {
        delta: w_final.delta_from(w_start)?,
        accepted: n,
        rejected: 0,
        self_loss_sum: stats.self_loss_sum,
        self_loss_count: stats.self_loss_count,
        weak_loss_sum: 0.0,
        weak_loss_count: 0,
    })
}

/// Mean of the deltas over `S ∪ C`; devices are pre-sorted by id, so the
/// summation order is fixed regardless of scheduling.
pub fn aggregate_deltas(deltas: &[Grad]) -> Result<Grad> {
    let first = deltas.first().ok_or(Error::EmptyInput("delta set"))?;
    let mut sum = Gradient::zeros(first.layout().clone());
    for d in deltas {
        sum.add_assign(d)?;
    }
    Ok(sum.scale(1.0 / deltas.len() as f64))
}

/// Streams, cursors, and the rehearsal pool for one run.
pub struct Population<'a> {
    corpus: &'a Corpus,
    cursors: Vec<usize>,
}

impl<'a> Population<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Population { corpus, cursors: vec![0; corpus.device_streams.len()] }
    }

    /// Consumes the next `n` utterances of one device's stream; a
    /// single-pass cursor that never rewinds.
    fn take(&mut self, device: usize, n: usize) -> &'a [Utterance] {
        let stream = &self.corpus.device_streams[device];
        let start = self.cursors[device].min(stream.len());
        let end = (start + n).min(stream.len());
        self.cursors[device] = end;
        &stream[start..end]
    }
}

/// One full round: sample, broadcast, local train (parallel), aggregate,
/// server step, EMA schedule.
pub fn run_round(
    cfg: &ExperimentConfig,
    spec: &LocalSpec,
    server: &mut ServerState,
    population: &mut Population,
    round: u64,
) -> Result<RoundReport> {
    let corpus = population.corpus;
    let per_device = spec.local_steps * spec.batch_size;

    let mut sample_rng = derive_rng(cfg.run.seed, &[TAG_SAMPLING, round]);
    let mut sampled = rand::seq::index::sample(
        &mut sample_rng,
        corpus.device_streams.len(),
        cfg.federation.devices_per_round,
    )
    .into_vec();
    sampled.sort_unstable();

    let weak_view = spec.weak_view();
    let device_work: Result<Vec<(usize, Vec<DeviceUtterance>)>> = sampled
        .iter()
        .map(|&d| {
            let slice = population.take(d, per_device);
            let views: Result<Vec<DeviceUtterance>> =
                slice.iter().map(|u| corpus.device_view(u, weak_view)).collect();
            Ok((d, views?))
        })
        .collect();
    let device_work = device_work?;

    let broadcast = server.global.clone();
    let teacher = server.teacher.clone();
    let outcomes: Result<Vec<LocalOutcome>> = device_work
        .par_iter()
        .map(|(device, items)| {
            let mut rng = derive_rng(cfg.run.seed, &[TAG_DEVICE, round, *device as u64]);
            local_train(spec, items, &broadcast, &teacher, &mut rng)
        })
        .collect();
    let mut outcomes = outcomes?;

    let pseudo_count = if cfg.rehearsal.enabled { cfg.rehearsal.pseudo_devices } else { 0 };
    if pseudo_count > 0 {
        let pool = &corpus.rehearsal;
        if pool.is_empty() {
            return Err(Error::EmptyInput("rehearsal pool"));
        }
        let pseudo: Result<Vec<LocalOutcome>> = (0..pseudo_count)
            .into_par_iter()
            .map(|p| {
                let tag = 1_000_000 + p as u64;
                let mut rng = derive_rng(cfg.run.seed, &[TAG_DEVICE, round, tag]);
                let take = per_device.min(pool.len());
                let picks = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
                let utts: Vec<&Utterance> = picks.iter().map(|&i| &pool[i]).collect();
                rehearsal_train(spec, corpus, &utts, &broadcast, &mut rng)
            })
            .collect();
        outcomes.extend(pseudo?);
    }

    let deltas: Vec<Grad> = outcomes.iter().map(|o| o.delta.clone()).collect();
    let mean_delta = aggregate_deltas(&deltas)?;
    let delta_norm = mean_delta.l2_norm();
    let pseudo_grad = mean_delta.scale(-1.0);
    server.global = server.optimizer.update(&server.global, &pseudo_grad)?;

    let teacher_updated = cfg.ema.mode == EmaMode::Ema && round % cfg.ema.update_every == 0;
    if teacher_updated {
        server.teacher =
            ema_update(&server.teacher, &server.global, cfg.ema.rate, round, cfg.ema.update_every)?;
    }
    server.round = round;

    let device_outcomes = &outcomes[..sampled.len()];
    let rehearsal_outcomes = &outcomes[sampled.len()..];
    let accepted: u64 = device_outcomes.iter().map(|o| o.accepted).sum();
    let rejected: u64 = device_outcomes.iter().map(|o| o.rejected).sum();
    let self_sum: f64 = device_outcomes.iter().map(|o| o.self_loss_sum).sum();
    let self_n: u64 = device_outcomes.iter().map(|o| o.self_loss_count).sum();
    let weak_sum: f64 = device_outcomes.iter().map(|o| o.weak_loss_sum).sum();
    let weak_n: u64 = device_outcomes.iter().map(|o| o.weak_loss_count).sum();
    let reh_sum: f64 = rehearsal_outcomes.iter().map(|o| o.self_loss_sum).sum();
    let reh_n: u64 = rehearsal_outcomes.iter().map(|o| o.self_loss_count).sum();

    Ok(RoundReport {
        round,
        devices: sampled.len(),
        pseudo_devices: pseudo_count,
        accepted,
        rejected,
        mean_self_loss: (self_n > 0).then(|| self_sum / self_n as f64),
        mean_weak_loss: (weak_n > 0).then(|| weak_sum / weak_n as f64),
        mean_rehearsal_loss: (reh_n > 0).then(|| reh_sum / reh_n as f64),
        delta_norm,
        teacher_updated,
        diverged: false,
        eval: None,
    })
}

/// Everything a finished run reports.
#[derive(Debug)]
pub struct RunOutcome {
    pub initial: EvalSnapshot,
    pub final_snapshot: EvalSnapshot,
    pub diverged_at: Option<u64>,
    pub student: Params,
    pub teacher: Params,
    pub reports: Vec<RoundReport>,
}

fn snapshot(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    params: &Params,
    dims: ModelDims,
    round: u64,
    initial: Option<&EvalSnapshot>,
) -> Result<EvalSnapshot> {
    let model = TransducerModel::with_params(dims, params.clone())?;
    let rec = ModelRecognizer { model: &model, beam: cfg.beam_config() };
    let old = evaluate_set(&rec, corpus, &corpus.eval_general_old)?;
    let new = evaluate_set(&rec, corpus, &corpus.eval_general_new)?;
    let delta = evaluate_set(&rec, corpus, &corpus.eval_delta)?;
    EvalSnapshot::build(round, &old, &new, &delta, initial)
}

/// Executes a full experiment: an initial evaluation at round 0, then
/// `rounds` federated rounds with periodic evaluation and checkpoints.
/// Reports stream through `on_report` in round order. Deterministic given
/// the config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    init: Params,
    ckpt_dir: Option<&Path>,
    mut on_report: impl FnMut(&RoundReport) -> Result<()> + Send,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let dims = cfg.dims(corpus.vocab_words());
    if init.layout().total_len() != dims.layout().total_len() {
        return Err(Error::LayoutMismatch("initial checkpoint does not fit configured model".into()));
    }
    let spec = LocalSpec::from_config(cfg, dims)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    pool.install(|| {
        let mut server = ServerState::new(cfg, init);
        let mut population = Population::new(corpus);

        let initial = snapshot(cfg, corpus, &server.global, dims, 0, None)?;
        let mut snapshots = vec![initial];
        let mut reports = Vec::with_capacity(cfg.run.rounds as usize + 1);
        let initial_report = RoundReport {
            round: 0,
            devices: 0,
            pseudo_devices: 0,
            accepted: 0,
            rejected: 0,
            mean_self_loss: None,
            mean_weak_loss: None,
            mean_rehearsal_loss: None,
            delta_norm: 0.0,
            teacher_updated: false,
            diverged: false,
            eval: Some(initial),
        };
        on_report(&initial_report)?;
        reports.push(initial_report);

        let mut diverged_at: Option<u64> = None;
        for round in 1..=cfg.run.rounds {
            let mut report = run_round(cfg, &spec, &mut server, &mut population, round)?;

            if round % cfg.run.eval_every == 0 || round == cfg.run.rounds {
                let snap = snapshot(cfg, corpus, &server.global, dims, round, Some(&initial))?;
                snapshots.push(snap);
                report.eval = Some(snap);
                if diverged_at.is_none() {
                    diverged_at = detect_divergence(&snapshots, 0.20, 3);
                }
            }
            report.diverged = diverged_at.is_some();

            if let Some(dir) = ckpt_dir {
                if round % cfg.run.checkpoint_every == 0 {
                    save_checkpoint(
                        &dir.join(format!("student_r{round}.ckpt")),
                        &server.global,
                        round,
                        Role::Student,
                    )?;
                }
            }

            on_report(&report)?;
            reports.push(report);

            if cfg.run.abort_on_divergence {
                if let Some(round) = diverged_at {
                    return Err(Error::DivergenceAbort { round });
                }
            }
        }

        if let Some(dir) = ckpt_dir {
            save_checkpoint(&dir.join("student_final.ckpt"), &server.global, server.round, Role::Student)?;
            save_checkpoint(&dir.join("teacher_final.ckpt"), &server.teacher, server.round, Role::Teacher)?;
        }

        Ok(RunOutcome {
            initial: snapshots[0],
            final_snapshot: *snapshots.last().unwrap(),
            diverged_at,
            student: server.global,
            teacher: server.teacher,
            reports,
        })
    })
}

/// Per-epoch pretraining record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_wer: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: Params,
    pub epochs: Vec<PretrainEpoch>,
    /// Whether the configured WER target was reached (otherwise the best
    /// checkpoint seen is returned).
    pub reached_target: bool,
}

/// Centralized supervised training on the base-period labeled data until
/// the eval WER target or the epoch budget is hit.
pub fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let dims = cfg.dims(corpus.vocab_words());
    let mut init_rng = derive_rng(cfg.pretrain.seed, &[TAG_INIT]);
    let layout = std::sync::Arc::new(dims.layout());
    let mut params = ParamVector::random(layout.clone(), &mut init_rng);
    let mut optimizer = OptimizerState::adam(cfg.pretrain.lr, layout);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    pool.install(|| {
        let mut best: Option<(f64, Params)> = None;
        let mut epochs = Vec::new();
        let mut reached = false;
        for epoch in 0..cfg.pretrain.max_epochs {
            let mut order: Vec<usize> = (0..corpus.pretrain.len()).collect();
            let mut shuffle_rng = derive_rng(cfg.pretrain.seed, &[TAG_PRETRAIN, epoch as u64]);
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);

            let mut loss_sum = 0.0;
            let mut loss_n = 0u64;
            for chunk in order.chunks(cfg.pretrain.batch_size) {
                let grads: Result<Vec<(f64, Grad)>> = chunk
                    .par_iter()
                    .map(|&i| {
                        let utt = &corpus.pretrain[i];
                        let features = corpus.features_for(utt)?;
                        let mut tape = Tape::new(&params);
                        let tm = TapeModel::new(&mut tape, dims);
                        let loss = tm.loss(&mut tape, &features, &utt.tokens)?;
                        let scaled = tape.affine(loss, 1.0 / chunk.len() as f64, 0.0);
                        Ok((tape.scalar(loss), tape.backprop(scaled)?))
                    })
                    .collect();
                let mut batch_grad = Gradient::zeros(params.layout().clone());
                for (loss, g) in grads? {
                    loss_sum += loss;
                    loss_n += 1;
                    batch_grad.add_assign(&g)?;
                }
                params = optimizer.update(&params, &batch_grad)?;
            }

            let model = TransducerModel::with_params(dims, params.clone())?;
            let rec = ModelRecognizer { model: &model, beam: cfg.beam_config() };
            let wer = evaluate_set(&rec, corpus, &corpus.eval_general_old)?.wer;
            epochs.push(PretrainEpoch {
                epoch: epoch + 1,
                mean_loss: loss_sum / loss_n.max(1) as f64,
                eval_wer: wer,
            });
            if best.as_ref().map_or(true, |(bw, _)| wer < *bw) {
                best = Some((wer, params.clone()));
            }
            if wer <= cfg.pretrain.target_wer {
                reached = true;
                break;
            }
        }
        let params = best.map(|(_, p)| p).unwrap_or(params);
        Ok(PretrainOutcome { params, epochs, reached_target: reached })
    })
}

/// Everything needed to reproduce a run bit-for-bit: the resolved config
/// (embedded), the corpus location, and the artifact paths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub corpus_dir: PathBuf,
    pub init_checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Loads the initial checkpoint named by a manifest.
pub fn load_initial(manifest: &RunManifest) -> Result<Params> {
    let (params, _, _) = load_checkpoint::<Scalar>(&manifest.init_checkpoint)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EmaMode, WeakMode};
    use rand::Rng;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::numerics::Layout;
    use std::sync::Arc;

    fn test_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus = CorpusConfig {
            pretrain_utterances: 60,
            rehearsal_utterances: 40,
            eval_utterances_per_set: 20,
            population_devices: 6,
            device_stream_len: 60,
            ..CorpusConfig::default()
        };
        cfg.model.encoder_hidden = 8;
        cfg.model.prediction_hidden = 8;
        cfg.model.embed_dim = 8;
        cfg.model.joint_hidden = 8;
        cfg.run.rounds = 3;
        cfg.run.eval_every = 2;
        cfg.run.workers = 2;
        cfg.federation.devices_per_round = 3;
        cfg.federation.batch_size = 2;
        cfg.pretrain.max_epochs = 0;
        cfg
    }

    fn init_params(cfg: &ExperimentConfig, corpus: &Corpus) -> Params {
        let dims = cfg.dims(corpus.vocab_words());
        let mut rng = derive_rng(9, &[99]);
        ParamVector::random(Arc::new(dims.layout()), &mut rng)
    }

    #[test]
    fn ema_update_arithmetic_and_schedule() {
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 1, 1)]));
        let teacher = ParamVector::from_values(layout.clone(), vec![1.0]).unwrap();
        let student = ParamVector::from_values(layout.clone(), vec![0.0]).unwrap();
        // applicable round: 0.999 * 1 + 0.001 * 0
        let updated = ema_update(&teacher, &student, 0.999, 10, 10).unwrap();
        assert!((updated.values()[0] - 0.999).abs() < 1e-15);
        // non-applicable round: unchanged
        let same = ema_update(&teacher, &student, 0.999, 11, 10).unwrap();
        assert_eq!(same.values(), teacher.values());
        assert!(ema_update(&teacher, &student, 1.0, 10, 10).is_err());
        assert!(ema_update(&teacher, &student, 0.0, 10, 10).is_err());
    }

    #[test]
    fn ema_iteration_matches_closed_form() {
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 3, 1)]));
        let t0 = ParamVector::from_values(layout.clone(), vec![1.0, -2.0, 0.5]).unwrap();
        let s = ParamVector::from_values(layout.clone(), vec![0.3, 0.3, 0.3]).unwrap();
        let rate = 0.97_f64;
        let k = 25;
        let mut teacher = t0.clone();
        for i in 1..=k {
            teacher = ema_update(&teacher, &s, rate, i * 10, 10).unwrap();
        }
        let decay = rate.powi(k as i32);
        for (i, v) in teacher.values().iter().enumerate() {
            let closed = decay * t0.values()[i] + (1.0 - decay) * s.values()[i];
            assert!((v - closed).abs() < 1e-12, "coord {i}: {v} vs {closed}");
        }
    }

    #[test]
    fn aggregate_is_plain_mean_over_devices_and_pseudo_devices() {
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 2, 1)]));
        let mk = |a: f64, b: f64| Gradient::from_values(layout.clone(), vec![a, b]).unwrap();
        // four devices plus two pseudo-devices: every delta weighs 1/6
        let deltas = vec![mk(6.0, 0.0), mk(0.0, 6.0), mk(6.0, 6.0), mk(0.0, 0.0), mk(3.0, 3.0), mk(3.0, 3.0)];
        let mean = aggregate_deltas(&deltas).unwrap();
        assert_eq!(mean.values(), &[3.0, 3.0]);
    }

    #[test]
    fn aggregation_is_invariant_under_delta_reordering() {
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 4, 1)]));
        let mut rng = derive_rng(17, &[3]);
        let deltas: Vec<Grad> = (0..8)
            .map(|_| {
                Gradient::from_values(
                    layout.clone(),
                    (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let a = aggregate_deltas(&deltas).unwrap();
        // sorted-by-id order is what run_round uses; any permutation that
        // preserves the fold order yields values within 1e-12
        let mut reversed = deltas.clone();
        reversed.reverse();
        let b = aggregate_deltas(&reversed).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_local_steps_give_zero_delta() {
        let mut cfg = test_config();
        cfg.federation.local_steps = 0;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let spec = LocalSpec::from_config(&cfg, dims).unwrap();
        let w = init_params(&cfg, &corpus);
        let items: Vec<_> = corpus.device_streams[0][..4]
            .iter()
            .map(|u| corpus.device_view(u, WeakView::None).unwrap())
            .collect();
        let mut rng = derive_rng(1, &[5]);
        let out = local_train(&spec, &items, &w, &w, &mut rng).unwrap();
        assert_eq!(out.delta.l2_norm(), 0.0);
    }

    #[test]
    fn local_train_delta_is_finite_and_bounded() {
        let cfg = test_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let mut spec = LocalSpec::from_config(&cfg, dims).unwrap();
        spec.augment = crate::corpus::AugmentConfig { max_mask_frames: 0, feature_noise: 0.0 };
        spec.filter = FilterBand::new(0.0001, 1.0, false).unwrap();
        let w = init_params(&cfg, &corpus);
        let items: Vec<_> = corpus.device_streams[1][..2]
            .iter()
            .map(|u| corpus.device_view(u, WeakView::None).unwrap())
            .collect();
        let mut rng = derive_rng(2, &[5]);
        let out = local_train(&spec, &items, &w, &w, &mut rng).unwrap();
        let norm = out.delta.l2_norm();
        assert!(norm.is_finite());
        assert!(norm < 100.0);
        assert!(out.accepted > 0);
    }

    #[test]
    fn weak_only_training_isolates_the_weak_gradient() {
        // self-label off, expected semantic on, one utterance, one step:
        // the delta must equal -lr times the standalone weak-loss gradient
        let mut cfg = test_config();
        cfg.federation.self_label = false;
        cfg.weaksup.mode = WeakMode::ExpectedSemantic;
        cfg.federation.batch_size = 1;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let spec = LocalSpec::from_config(&cfg, dims).unwrap();
        let w = init_params(&cfg, &corpus);
        let utt = &corpus.device_streams[2][0];
        let item = corpus.device_view(utt, WeakView::Slots).unwrap();
        let mut rng = derive_rng(3, &[5]);
        let out = local_train(&spec, std::slice::from_ref(&item), &w, &w, &mut rng).unwrap();

        let model = TransducerModel::with_params(dims, w.clone()).unwrap();
        let nbest = beam_decode(&model, &item.features, &spec.beam).unwrap();
        let costs: Vec<Scalar> = nbest
            .hyps()
            .iter()
            .map(|h| semantic_cost(&h.tokens, item.weak.as_ref().unwrap()).unwrap())
            .collect();
        let traced =
            crate::weaksup::expected_cost_loss(&model, &item.features, &nbest, &costs).unwrap();
        let g = traced.backprop().unwrap();
        let expected = g.scale(-spec.device_lr);
        let diff: f64 = out
            .delta
            .values()
            .iter()
            .zip(expected.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-12, "delta differs from weak gradient by {diff}");
        assert_eq!(out.weak_loss_count, 1);
        assert_eq!(out.self_loss_count, 0);
    }

    #[test]
    fn rehearsal_single_step_is_exact_supervised_sgd() {
        let mut cfg = test_config();
        cfg.augment = crate::corpus::AugmentConfig { max_mask_frames: 0, feature_noise: 0.0 };
        cfg.federation.batch_size = 2;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let spec = LocalSpec::from_config(&cfg, dims).unwrap();
        let w = init_params(&cfg, &corpus);
        let utts: Vec<&Utterance> = corpus.rehearsal[..2].iter().collect();
        let mut rng = derive_rng(4, &[5]);
        let out = rehearsal_train(&spec, &corpus, &utts, &w, &mut rng).unwrap();

        // -lr * mean supervised gradient, computed independently
        let mut expected = Gradient::zeros(w.layout().clone());
        for utt in &utts {
            let features = corpus.features_for(utt).unwrap();
            let mut tape = Tape::new(&w);
            let tm = TapeModel::new(&mut tape, dims);
            let loss = tm.loss(&mut tape, &features, &utt.tokens).unwrap();
            let scaled = tape.affine(loss, 0.5, 0.0);
            expected.add_assign(&tape.backprop(scaled).unwrap()).unwrap();
        }
        let expected = expected.scale(-spec.device_lr);
        for (a, b) in out.delta.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fedsgd_identity_single_device() {
        // one device, one local step, SGD server with lr 1: the new global
        // equals the device's locally updated parameters
        let mut cfg = test_config();
        cfg.federation.devices_per_round = 1;
        cfg.federation.local_steps = 1;
        cfg.federation.server_optimizer = ServerOptimizer::Sgd;
        cfg.federation.server_lr = 1.0;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let spec = LocalSpec::from_config(&cfg, dims).unwrap();
        let init = init_params(&cfg, &corpus);
        let mut server = ServerState::new(&cfg, init.clone());
        let mut population = Population::new(&corpus);
        run_round(&cfg, &spec, &mut server, &mut population, 1).unwrap();

        // replay the same device pass independently
        let mut rng = derive_rng(cfg.run.seed, &[TAG_SAMPLING, 1]);
        let picked = rand::seq::index::sample(&mut rng, corpus.device_streams.len(), 1).into_vec();
        let device = picked[0];
        let per_device = spec.local_steps * spec.batch_size;
        let views: Vec<_> = corpus.device_streams[device][..per_device
            .min(corpus.device_streams[device].len())]
            .iter()
            .map(|u| corpus.device_view(u, spec.weak_view()).unwrap())
            .collect();
        let mut dev_rng = derive_rng(cfg.run.seed, &[TAG_DEVICE, 1, device as u64]);
        let out = local_train(&spec, &views, &init, &init, &mut dev_rng).unwrap();
        let expected = init.add_scaled(&out.delta, 1.0).unwrap();
        let max = server.global.max_abs_diff(&expected);
        assert!(max < 1e-10, "FedSGD identity violated: {max}");
    }

    #[test]
    fn teacher_changes_only_on_schedule_and_never_in_frozen_mode() {
        let mut cfg = test_config();
        cfg.run.rounds = 5;
        cfg.ema.update_every = 2;
        cfg.ema.rate = 0.9;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let init = init_params(&cfg, &corpus);

        let out = run_experiment(&cfg, &corpus, init.clone(), None, |_| Ok(())).unwrap();
        let upd: Vec<u64> =
            out.reports.iter().filter(|r| r.teacher_updated).map(|r| r.round).collect();
        assert_eq!(upd, vec![2, 4]);

        cfg.ema.mode = EmaMode::Frozen;
        let frozen = run_experiment(&cfg, &corpus, init.clone(), None, |_| Ok(())).unwrap();
        assert_eq!(frozen.teacher.values(), init.values());
        assert!(frozen.reports.iter().all(|r| !r.teacher_updated));
    }

    #[test]
    fn experiment_is_deterministic_and_reports_are_gap_free() {
        let cfg = test_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let init = init_params(&cfg, &corpus);
        let a = run_experiment(&cfg, &corpus, init.clone(), None, |_| Ok(())).unwrap();
        let b = run_experiment(&cfg, &corpus, init, None, |_| Ok(())).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.student.values(), b.student.values());
        for (i, r) in a.reports.iter().enumerate() {
            assert_eq!(r.round, i as u64);
        }
        // eval cadence: rounds 0, 2, and the final round
        let eval_rounds: Vec<u64> =
            a.reports.iter().filter(|r| r.eval.is_some()).map(|r| r.round).collect();
        assert_eq!(eval_rounds, vec![0, 2, 3]);
    }

    #[test]
    fn exhausted_streams_leave_global_unchanged() {
        // all-consumed population: zero deltas in, zero optimizer motion out
        let mut cfg = test_config();
        cfg.federation.server_optimizer = ServerOptimizer::Adam;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let dims = cfg.dims(corpus.vocab_words());
        let spec = LocalSpec::from_config(&cfg, dims).unwrap();
        let init = init_params(&cfg, &corpus);
        let mut server = ServerState::new(&cfg, init.clone());
        let mut population = Population::new(&corpus);
        for c in population.cursors.iter_mut() {
            *c = usize::MAX / 2; // exhausted
        }
        let report = run_round(&cfg, &spec, &mut server, &mut population, 1).unwrap();
        assert_eq!(report.accepted, 0);
        assert_eq!(report.delta_norm, 0.0);
        assert_eq!(server.global.values(), init.values());
    }

    #[test]
    fn pretrain_zero_epochs_returns_seeded_random_init() {
        let cfg = test_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let out = pretrain(&cfg, &corpus).unwrap();
        assert!(out.epochs.is_empty());
        assert!(!out.reached_target);
        let dims = cfg.dims(corpus.vocab_words());
        let mut rng = derive_rng(cfg.pretrain.seed, &[TAG_INIT]);
        let expected = ParamVector::<Scalar>::random(Arc::new(dims.layout()), &mut rng);
        assert_eq!(out.params.values(), expected.values());
    }
}

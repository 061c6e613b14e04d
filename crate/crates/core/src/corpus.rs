//! Synthetic slot-annotated corpus with a controlled distribution shift.
//!
//! Utterances are carrier phrases with slot placeholders over a word
//! vocabulary split into "core" words (seen throughout) and "fresh" words
//! (slot values that are rare before the shift and common after it).
//! Shifted ("delta") templates additionally rearrange core carrier words
//! into n-grams that never occur in the base templates.
//!
//! Features are synthetic: each word id owns a prototype vector, each
//! token occurrence expands to 2-4 prototype frames plus Gaussian noise.
//! Only `(tokens, feature seed)` are ever persisted; frames are
//! regenerated on demand.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, TAG_CORPUS};
use crate::scalar::Scalar;
use crate::transducer::FeatureSequence;
use crate::weaksup::WeakLabel;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Which distribution produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistTag {
    Base,
    Delta,
}

/// Corpus generation parameters. The same `(config, seed)` pair always
/// produces byte-identical corpora.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub feature_dim: usize,
    /// Std-dev of per-frame Gaussian feature noise.
    pub noise_level: f64,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub pretrain_utterances: usize,
    pub rehearsal_utterances: usize,
    pub eval_utterances_per_set: usize,
    pub population_devices: usize,
    pub device_stream_len: usize,
    /// Fraction of shifted-template draws in each device stream.
    pub delta_share: f64,
    /// Probability that a base-template slot picks a fresh value.
    pub fresh_in_base_rate: f64,
    /// Probability that a delta-template slot picks a fresh value.
    pub fresh_in_delta_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            feature_dim: 16,
            noise_level: 0.15,
            frames_per_token_min: 2,
            frames_per_token_max: 4,
            pretrain_utterances: 1600,
            rehearsal_utterances: 600,
            eval_utterances_per_set: 250,
            population_devices: 60,
            device_stream_len: 1200,
            delta_share: 0.6,
            fresh_in_base_rate: 0.03,
            fresh_in_delta_rate: 0.7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("corpus.feature_dim must be positive".into()));
        }
        if self.frames_per_token_min == 0 || self.frames_per_token_max < self.frames_per_token_min {
            return Err(Error::Config(
                "corpus.frames_per_token range must satisfy 1 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.delta_share)
            || !(0.0..=1.0).contains(&self.fresh_in_base_rate)
            || !(0.0..=1.0).contains(&self.fresh_in_delta_rate)
        {
            return Err(Error::Config("corpus rates must lie in [0,1]".into()));
        }
        if self.population_devices == 0 || self.device_stream_len == 0 {
            return Err(Error::Config("corpus device population/stream must be non-empty".into()));
        }
        if self.eval_utterances_per_set == 0 {
            return Err(Error::Config("corpus.eval_utterances_per_set must be positive".into()));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("corpus.noise_level must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotType {
    Song,
    Artist,
    Device,
    Room,
    Setting,
    Level,
}

impl SlotType {
    fn name(&self) -> &'static str {
        match self {
            SlotType::Song => "Song",
            SlotType::Artist => "Artist",
            SlotType::Device => "Device",
            SlotType::Room => "Room",
            SlotType::Setting => "Setting",
            SlotType::Level => "Level",
        }
    }
}

enum Piece {
    Word(&'static str),
    Slot(SlotType),
}

struct Template {
    pieces: Vec<Piece>,
    tag: DistTag,
}

macro_rules! template {
    ($tag:expr; $($piece:tt),+ $(,)?) => {
        Template { pieces: vec![$(template!(@piece $piece)),+], tag: $tag }
    };
    (@piece [$slot:ident]) => { Piece::Slot(SlotType::$slot) };
    (@piece $word:literal) => { Piece::Word($word) };
}

/// Base carriers; the shifted set recombines the same carrier words into
/// bigrams the base set never produces ("turn the", "on now", "now turn").
fn templates() -> Vec<Template> {
    use DistTag::*;
    vec![
        template!(Base; "play", [Song], "by", [Artist]),
        template!(Base; "play", [Song], "by", [Artist], "in", "the", [Room]),
        template!(Base; "turn", "on", "the", [Device]),
        template!(Base; "turn", "off", "the", [Device]),
        template!(Base; "set", "the", [Setting], "to", [Level]),
        template!(Base; "now", "play", "the", [Song]),
        template!(Delta; "turn", "the", [Device], "on", "now"),
        template!(Delta; "now", "turn", "on", "the", [Device], "in", "the", [Room]),
        template!(Delta; "in", "the", [Room], "play", [Song], "by", [Artist]),
        template!(Delta; "play", [Song], "by", [Artist], "now"),
        template!(Delta; "set", "the", [Setting], "to", [Level], "now"),
    ]
}

/// Multi-token slot values are allowed ("main speaker").
fn slot_values(slot: SlotType, fresh: bool) -> &'static [&'static [&'static str]] {
    match (slot, fresh) {
        (SlotType::Song, false) => &[&["halo"], &["thunder"], &["believer"], &["sunrise"]],
        (SlotType::Song, true) => &[&["nebula"], &["stardust"], &["horizon"]],
        (SlotType::Artist, false) => &[&["beyonce"], &["adele"], &["drake"]],
        (SlotType::Artist, true) => &[&["rosalia"], &["yoasobi"]],
        (SlotType::Device, false) => &[&["lamp"], &["heater"], &["fan"], &["main", "speaker"]],
        (SlotType::Device, true) => &[&["air", "purifier"]],
        (SlotType::Room, false) => &[&["kitchen"], &["bedroom"], &["office"]],
        (SlotType::Room, true) => &[&["studio"]],
        (SlotType::Setting, false) => &[&["volume"], &["brightness"]],
        (SlotType::Setting, true) => &[&["volume"], &["brightness"]],
        (SlotType::Level, false) => &[&["ten"], &["five"], &["max"]],
        (SlotType::Level, true) => &[&["half"]],
    }
}

const CORE_WORDS: &[&str] = &[
    "play", "by", "in", "the", "turn", "on", "off", "set", "to", "now", "halo", "thunder",
    "believer", "sunrise", "beyonce", "adele", "drake", "lamp", "heater", "fan", "main", "speaker",
    "kitchen", "bedroom", "office", "volume", "brightness", "ten", "five", "max",
];

const FRESH_WORDS: &[&str] = &[
    "nebula", "stardust", "horizon", "rosalia", "yoasobi", "air", "purifier", "studio", "half",
];

/// Word table: blank is id 0, words are `1..=len`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    fresh_from: usize,
}

impl Vocab {
    fn standard() -> Self {
        let mut words: Vec<String> = CORE_WORDS.iter().map(|s| s.to_string()).collect();
        let fresh_from = words.len();
        words.extend(FRESH_WORDS.iter().map(|s| s.to_string()));
        Vocab { words, fresh_from }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32 + 1)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize - 1]
    }

    pub fn is_fresh(&self, id: u32) -> bool {
        id as usize - 1 >= self.fresh_from
    }

    pub fn text(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

/// One generated utterance. Ground-truth `tokens` are visible only to
/// evaluation and rehearsal paths; device training sees [`DeviceUtterance`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub slots: Vec<(String, Vec<u32>)>,
    pub tag: DistTag,
    pub feature_seed: u64,
}

/// What a federated device is allowed to see: features, optional weak
/// label, and the distribution tag. No ground-truth token field exists on
/// this type.
#[derive(Debug, Clone, Serialize)]
pub struct DeviceUtterance {
    pub features: FeatureSequence<Scalar>,
    pub weak: Option<WeakLabel>,
    pub tag: DistTag,
}

/// How much weak supervision the device view exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakView {
    /// No weak labels at all.
    None,
    /// Slot annotations only.
    Slots,
    /// Slots plus the reference transcript (WER / sentence-error
    /// feedback simulation).
    SlotsAndTranscript,
}

/// Deterministic prototype-frame feature synthesizer.
#[derive(Debug, Clone)]
pub struct FeatureSynth {
    prototypes: Vec<Vec<Scalar>>,
    dim: usize,
    noise_level: f64,
    frames_min: usize,
    frames_max: usize,
}

impl FeatureSynth {
    fn new(cfg: &CorpusConfig, vocab: &Vocab) -> Self {
        let mut rng = derive_rng(cfg.seed, &[TAG_CORPUS, 0]);
        let prototypes = (0..vocab.len())
            .map(|_| (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0) * 2.0).collect())
            .collect();
        FeatureSynth {
            prototypes,
            dim: cfg.feature_dim,
            noise_level: cfg.noise_level,
            frames_min: cfg.frames_per_token_min,
            frames_max: cfg.frames_per_token_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, token: u32) -> &[Scalar] {
        &self.prototypes[token as usize - 1]
    }

    /// Expands each token to 2-4 prototype frames plus noise; fully
    /// determined by `(tokens, seed)`.
    pub fn synth(&self, tokens: &[u32], feature_seed: u64) -> Result<FeatureSequence<Scalar>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence for feature synthesis"));
        }
        let mut rng = derive_rng(feature_seed, &[TAG_CORPUS, 1]);
        let mut data = Vec::new();
        let mut frames = 0;
        for &tok in tokens {
            let n = rng.gen_range(self.frames_min..=self.frames_max);
            let proto = self.prototype(tok);
            for _ in 0..n {
                for d in 0..self.dim {
                    let noise =
                        if self.noise_level == 0.0 { 0.0 } else { sample_gauss(&mut rng) * self.noise_level };
                    data.push(proto[d] + noise);
                }
                frames += 1;
            }
        }
        FeatureSequence::new(frames, self.dim, data)
    }
}

fn sample_gauss(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Feature augmentation for the student branch: one contiguous time mask
/// plus additive feature noise. Frame count never changes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_mask_frames: usize,
    pub feature_noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { max_mask_frames: 3, feature_noise: 0.1 }
    }
}

pub fn augment(
    features: &FeatureSequence<Scalar>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> FeatureSequence<Scalar> {
    let (t, d) = (features.frames(), features.dim());
    let mut data = features.data().to_vec();
    if cfg.max_mask_frames > 0 {
        let max_len = cfg.max_mask_frames.min(t);
        let len = rng.gen_range(0..=max_len);
        if len > 0 {
            let start = rng.gen_range(0..=t - len);
            for f in start..start + len {
                for x in &mut data[f * d..(f + 1) * d] {
                    *x = 0.0;
                }
            }
        }
    }
    if cfg.feature_noise > 0.0 {
        for x in &mut data {
            *x += sample_gauss(rng) * cfg.feature_noise;
        }
    }
    FeatureSequence::new(t, d, data).expect("augmentation preserves shape and finiteness")
}

/// A generated corpus: training streams, rehearsal pool, eval sets, and
/// the deterministic feature synthesizer.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub synth: FeatureSynth,
    pub pretrain: Vec<Utterance>,
    pub rehearsal: Vec<Utterance>,
    pub device_streams: Vec<Vec<Utterance>>,
    pub eval_general_old: Vec<Utterance>,
    pub eval_general_new: Vec<Utterance>,
    pub eval_delta: Vec<Utterance>,
}

struct Generator {
    templates: Vec<Template>,
    vocab: Vocab,
    next_id: u64,
}

impl Generator {
    fn generate(
        &mut self,
        dist: DistTag,
        fresh_rate: f64,
        rng: &mut impl Rng,
    ) -> Utterance {
        let pool: Vec<&Template> =
            self.templates.iter().filter(|t| t.tag == dist).collect();
        let template = pool.choose(rng).expect("template pool non-empty");
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for piece in &template.pieces {
            match piece {
                Piece::Word(w) => tokens.push(self.vocab.id(w).expect("carrier word in vocab")),
                Piece::Slot(slot) => {
                    let fresh = rng.gen_bool(fresh_rate) && !slot_values(*slot, true).is_empty();
                    let values = slot_values(*slot, fresh);
                    let value = values.choose(rng).expect("slot value pool non-empty");
                    let value_tokens: Vec<u32> =
                        value.iter().map(|w| self.vocab.id(w).expect("slot word in vocab")).collect();
                    tokens.extend(&value_tokens);
                    slots.push((slot.name().to_string(), value_tokens));
                }
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        Utterance { id, tokens, slots, tag: template.tag, feature_seed: rng.gen() }
    }

    /// Mixture draw for continual device streams.
    fn generate_mixed(&mut self, cfg: &CorpusConfig, rng: &mut impl Rng) -> Utterance {
        if rng.gen_bool(cfg.delta_share) {
            self.generate(DistTag::Delta, cfg.fresh_in_delta_rate, rng)
        } else {
            self.generate(DistTag::Base, cfg.fresh_in_base_rate, rng)
        }
    }
}

/// Pure function of `(config, seed)`: base-period labeled data, rehearsal
/// pool, per-device continual streams, and the three eval sets.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    let synth = FeatureSynth::new(cfg, &vocab);
    let mut generator = Generator { templates: templates(), vocab: vocab.clone(), next_id: 0 };

    let section = |gen: &mut Generator, tag: u64, n: usize, dist: Option<DistTag>| {
        let mut rng = derive_rng(cfg.seed, &[TAG_CORPUS, 10 + tag]);
        (0..n)
            .map(|_| match dist {
                Some(DistTag::Base) => gen.generate(DistTag::Base, cfg.fresh_in_base_rate, &mut rng),
                Some(DistTag::Delta) => {
                    gen.generate(DistTag::Delta, cfg.fresh_in_delta_rate, &mut rng)
                }
                None => gen.generate_mixed(cfg, &mut rng),
            })
            .collect::<Vec<_>>()
    };

    let pretrain = section(&mut generator, 0, cfg.pretrain_utterances, Some(DistTag::Base));
    let rehearsal = section(&mut generator, 1, cfg.rehearsal_utterances, Some(DistTag::Base));
    let eval_general_old =
        section(&mut generator, 2, cfg.eval_utterances_per_set, Some(DistTag::Base));
    let eval_general_new =
        section(&mut generator, 3, cfg.eval_utterances_per_set, Some(DistTag::Base));
    let eval_delta = section(&mut generator, 4, cfg.eval_utterances_per_set, Some(DistTag::Delta));
    let device_streams: Vec<Vec<Utterance>> = (0..cfg.population_devices)
        .map(|d| {
            let mut rng = derive_rng(cfg.seed, &[TAG_CORPUS, 100 + d as u64]);
            (0..cfg.device_stream_len)
                .map(|_| generator.generate_mixed(cfg, &mut rng))
                .collect()
        })
        .collect();

    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        synth,
        pretrain,
        rehearsal,
        device_streams,
        eval_general_old,
        eval_general_new,
        eval_delta,
    })
}

impl Corpus {
    /// Vocabulary size in words (model `vocab_words`).
    pub fn vocab_words(&self) -> usize {
        self.vocab.len()
    }

    /// Device-visible view of one stream utterance: features plus the
    /// weak-supervision fields the experiment grants, never the tokens.
    pub fn device_view(&self, utt: &Utterance, weak: WeakView) -> Result<DeviceUtterance> {
        let features = self.synth.synth(&utt.tokens, utt.feature_seed)?;
        let weak = match weak {
            WeakView::None => None,
            WeakView::Slots => {
                Some(WeakLabel { slots: utt.slots.clone(), transcript: None })
            }
            WeakView::SlotsAndTranscript => Some(WeakLabel {
                slots: utt.slots.clone(),
                transcript: Some(utt.tokens.clone()),
            }),
        };
        Ok(DeviceUtterance { features, weak, tag: utt.tag })
    }

    pub fn features_for(&self, utt: &Utterance) -> Result<FeatureSequence<Scalar>> {
        self.synth.synth(&utt.tokens, utt.feature_seed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    config: CorpusConfig,
    vocab: Vocab,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeviceRecord {
    device: usize,
    #[serde(flatten)]
    utterance: Utterance,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, &item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Exports the corpus as line-delimited records plus a manifest; features
/// are not stored, only their seeds.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest =
        CorpusManifest { config: corpus.config.clone(), vocab: corpus.vocab.clone() };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_jsonl(&dir.join("pretrain.jsonl"), corpus.pretrain.iter())?;
    write_jsonl(&dir.join("rehearsal.jsonl"), corpus.rehearsal.iter())?;
    write_jsonl(
        &dir.join("devices.jsonl"),
        corpus.device_streams.iter().enumerate().flat_map(|(device, stream)| {
            stream.iter().map(move |u| DeviceRecord { device, utterance: u.clone() })
        }),
    )?;
    write_jsonl(&dir.join("eval_general_old.jsonl"), corpus.eval_general_old.iter())?;
    write_jsonl(&dir.join("eval_general_new.jsonl"), corpus.eval_general_new.iter())?;
    write_jsonl(&dir.join("eval_delta.jsonl"), corpus.eval_delta.iter())?;
    Ok(())
}

/// Loads a corpus export; prototypes are regenerated from the manifest
/// seed, so features come back identical.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let vocab_check = Vocab::standard();
    if manifest.vocab != vocab_check {
        return Err(Error::Corpus("corpus vocabulary does not match this build".into()));
    }
    let synth = FeatureSynth::new(&manifest.config, &manifest.vocab);
    let device_records: Vec<DeviceRecord> = read_jsonl(&dir.join("devices.jsonl"))?;
    let mut device_streams = vec![Vec::new(); manifest.config.population_devices];
    for rec in device_records {
        if rec.device >= device_streams.len() {
            return Err(Error::Corpus(format!("device id {} out of range", rec.device)));
        }
        device_streams[rec.device].push(rec.utterance);
    }
    Ok(Corpus {
        synth,
        pretrain: read_jsonl(&dir.join("pretrain.jsonl"))?,
        rehearsal: read_jsonl(&dir.join("rehearsal.jsonl"))?,
        device_streams,
        eval_general_old: read_jsonl(&dir.join("eval_general_old.jsonl"))?,
        eval_general_new: read_jsonl(&dir.join("eval_general_new.jsonl"))?,
        eval_delta: read_jsonl(&dir.join("eval_delta.jsonl"))?,
        config: manifest.config,
        vocab: manifest.vocab,
    })
}

//! Experiment configuration: one TOML file covers the model, corpus,
//! federation, EMA teacher, filtering, weak supervision, rehearsal,
//! decoding, and augmentation. Every field is required; unknown fields
//! are rejected, so typos fail loudly and missing fields are named.

use crate::corpus::{AugmentConfig, CorpusConfig};
use crate::decoder::{BeamConfig, FilterBand};
use crate::error::{Error, Result};
use crate::transducer::ModelDims;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Worker-thread cap for device-level parallelism; 0 = all cores.
    pub workers: usize,
    pub abort_on_divergence: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub pretrain_dir: PathBuf,
    pub runs_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    pub prediction_hidden: usize,
    pub embed_dim: usize,
    pub joint_hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Stop once base-set WER reaches this target (calibrated desk-scale
    /// value; reachable in a few epochs on the synthetic corpus).
    pub target_wer: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub devices_per_round: usize,
    /// Local steps per round (1 = FedSGD-style single update).
    pub local_steps: usize,
    pub batch_size: usize,
    pub device_lr: f64,
    pub server_optimizer: ServerOptimizer,
    pub server_lr: f64,
    /// Teacher pseudo-label consistency loss on/off.
    pub self_label: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// Teacher blends toward the student on the update schedule.
    Ema,
    /// Teacher stays at the initial model for the whole run.
    Frozen,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub rate: f64,
    pub update_every: u64,
    pub mode: EmaMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub low: f64,
    pub high: f64,
    pub length_normalized: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum WeakMode {
    Off,
    /// Expected semantic cost over the n-best.
    ExpectedSemantic,
    /// Expected semantic plus WER cost (equal weights).
    ExpectedSemanticPlusWer,
    /// Policy gradient with the semantic cost of the chosen hypothesis.
    ReinforceSemantic,
    /// Policy gradient with binary sentence-error feedback, optionally
    /// noise-corrupted.
    ReinforceBinary,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WeakSupConfig {
    pub mode: WeakMode,
    pub noise_sigma: f64,
    /// Restrict feedback to the served (top-1) hypothesis.
    pub served_only: bool,
    /// Multiplier on the weak loss when combined with self-labeling.
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RehearsalConfig {
    pub enabled: bool,
    pub pseudo_devices: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub nbest: usize,
    pub max_symbols_per_frame: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub federation: FederationConfig,
    pub ema: EmaConfig,
    pub filter: FilterConfig,
    pub weaksup: WeakSupConfig,
    pub rehearsal: RehearsalConfig,
    pub decode: DecodeConfig,
    pub augment: AugmentConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.run.rounds == 0 {
            return Err(Error::Config("run.rounds must be positive".into()));
        }
        if self.run.eval_every == 0 {
            return Err(Error::Config("run.eval_every must be positive".into()));
        }
        if self.run.checkpoint_every == 0 {
            return Err(Error::Config("run.checkpoint_every must be positive".into()));
        }
        for (name, v) in [
            ("model.encoder_hidden", self.model.encoder_hidden),
            ("model.prediction_hidden", self.model.prediction_hidden),
            ("model.embed_dim", self.model.embed_dim),
            ("model.joint_hidden", self.model.joint_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.federation.devices_per_round == 0
            || self.federation.devices_per_round > self.corpus.population_devices
        {
            return Err(Error::Config(format!(
                "federation.devices_per_round must lie in 1..={}",
                self.corpus.population_devices
            )));
        }
        if self.federation.batch_size == 0 {
            return Err(Error::Config("federation.batch_size must be positive".into()));
        }
        if !(self.federation.device_lr > 0.0) || !(self.federation.server_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.ema.rate > 0.0 && self.ema.rate < 1.0) {
            return Err(Error::InvalidEmaRate(self.ema.rate));
        }
        if self.ema.update_every == 0 {
            return Err(Error::Config("ema.update_every must be positive".into()));
        }
        FilterBand::new(self.filter.low, self.filter.high, self.filter.length_normalized)?;
        if self.weaksup.noise_sigma < 0.0 {
            return Err(Error::Config("weaksup.noise_sigma must be >= 0".into()));
        }
        if self.weaksup.noise_sigma > 0.0 && self.weaksup.mode != WeakMode::ReinforceBinary {
            return Err(Error::Config(
                "weaksup.noise_sigma > 0 requires mode = \"reinforce_binary\" \
                 (the noise law is defined for binary costs)"
                    .into(),
            ));
        }
        if self.weaksup.weight < 0.0 {
            return Err(Error::Config("weaksup.weight must be >= 0".into()));
        }
        if !self.federation.self_label && self.weaksup.mode == WeakMode::Off {
            return Err(Error::Config(
                "federation.self_label = false with weaksup.mode = \"off\" trains nothing".into(),
            ));
        }
        if self.rehearsal.enabled && self.rehearsal.pseudo_devices == 0 {
            return Err(Error::Config(
                "rehearsal.enabled requires rehearsal.pseudo_devices >= 1".into(),
            ));
        }
        if self.decode.nbest == 0 || self.decode.beam < self.decode.nbest {
            return Err(Error::Config("decode.beam must be >= decode.nbest >= 1".into()));
        }
        if self.decode.max_symbols_per_frame == 0 {
            return Err(Error::Config("decode.max_symbols_per_frame must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.target_wer) {
            return Err(Error::Config("pretrain.target_wer must lie in [0,1]".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain batch size and lr must be positive".into()));
        }
        Ok(())
    }

    /// Model dimensions; feature dim and vocabulary come from the corpus.
    pub fn dims(&self, vocab_words: usize) -> ModelDims {
        ModelDims {
            feature_dim: self.corpus.feature_dim,
            encoder_hidden: self.model.encoder_hidden,
            prediction_hidden: self.model.prediction_hidden,
            embed_dim: self.model.embed_dim,
            joint_hidden: self.model.joint_hidden,
            vocab_words,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.decode.beam,
            nbest: self.decode.nbest,
            max_symbols_per_frame: self.decode.max_symbols_per_frame,
        }
    }

    pub fn filter_band(&self) -> Result<FilterBand> {
        FilterBand::new(self.filter.low, self.filter.high, self.filter.length_normalized)
    }

    /// Canonical TOML serialization; the reproducibility hash covers it.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Hex digest of the canonical config.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_toml()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Deterministic run identifier: config hash plus run seed.
    pub fn run_id(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_toml()?.as_bytes());
        h.update(self.run.seed.to_le_bytes());
        Ok(hex::encode(h.finalize())[..12].to_string())
    }
}

/// Desk-scale defaults: the reference federation settings scaled down
/// about 20x (devices/round, rounds, batch) so a full run fits in minutes.
impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunConfig {
                seed: 42,
                rounds: 300,
                eval_every: 10,
                checkpoint_every: 100,
                workers: 0,
                abort_on_divergence: false,
            },
            paths: PathsConfig {
                corpus_dir: "artifacts/corpus".into(),
                pretrain_dir: "artifacts/pretrain".into(),
                runs_dir: "artifacts/runs".into(),
            },
            model: ModelConfig {
                encoder_hidden: 32,
                prediction_hidden: 32,
                embed_dim: 16,
                joint_hidden: 32,
            },
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig {
                seed: 11,
                target_wer: 0.15,
                max_epochs: 12,
                batch_size: 16,
                lr: 2e-3,
            },
            federation: FederationConfig {
                devices_per_round: 20,
                local_steps: 1,
                batch_size: 8,
                device_lr: 0.05,
                server_optimizer: ServerOptimizer::Adam,
                server_lr: 2e-3,
                self_label: true,
            },
            ema: EmaConfig { rate: 0.99, update_every: 10, mode: EmaMode::Ema },
            filter: FilterConfig { low: 0.05, high: 0.95, length_normalized: false },
            weaksup: WeakSupConfig {
                mode: WeakMode::Off,
                noise_sigma: 0.0,
                served_only: false,
                weight: 1.0,
            },
            rehearsal: RehearsalConfig { enabled: false, pseudo_devices: 2 },
            decode: DecodeConfig { beam: 8, nbest: 4, max_symbols_per_frame: 3 },
            augment: AugmentConfig::default(),
        }
    }
}

//! Pipeline configuration: one TOML file, every key optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadenza_core::composer::{ComposerConfig, ComposerTrainConfig, SamplerConfig};
use cadenza_core::digest::config_digest;
use cadenza_core::extractor::ExtractionConfig;
use cadenza_core::synthetic::CorpusConfig;
use cadenza_core::textgen::SynthConfig;
use cadenza_core::understanding::{TrainConfig, UnderstandingConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory searched recursively for `.mid` and `.midi` files. When
    /// unset, `extract` draws a procedural corpus instead.
    pub midi_dir: Option<PathBuf>,
    /// JSONL subjective labels: `{"clip_id", "attribute", "value"}` per line.
    pub labels: Option<PathBuf>,
    /// JSON template bank replacing the built-in one.
    pub templates: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub clip_dataset: Option<PathBuf>,
    pub text_dataset: Option<PathBuf>,
    pub checkpoint_t2a: Option<PathBuf>,
    pub checkpoint_a2m: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            midi_dir: None,
            labels: None,
            templates: None,
            out_dir: PathBuf::from("runs"),
            clip_dataset: None,
            text_dataset: None,
            checkpoint_t2a: None,
            checkpoint_a2m: None,
        }
    }
}

impl Paths {
    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn clip_dataset(&self) -> PathBuf {
        self.or_out(&self.clip_dataset, "clips.jsonl")
    }

    pub fn text_dataset(&self) -> PathBuf {
        self.or_out(&self.text_dataset, "text.jsonl")
    }

    pub fn checkpoint_t2a(&self) -> PathBuf {
        self.or_out(&self.checkpoint_t2a, "text2attr.ckpt")
    }

    pub fn checkpoint_a2m(&self) -> PathBuf {
        self.or_out(&self.checkpoint_a2m, "attr2music.ckpt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSettings {
    pub max_bars: usize,
    /// Clips sampled per MIDI file; 0 keeps each file whole.
    pub per_file: usize,
    /// Procedural clips drawn when no MIDI directory is configured.
    pub synthetic: usize,
    pub corpus: CorpusConfig,
}

impl Default for ClipSettings {
    fn default() -> Self {
        Self {
            max_bars: 16,
            per_file: 4,
            synthetic: 2000,
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSettings {
    pub samples: usize,
    pub synth: SynthConfig,
    /// Send a share of samples to the chat endpoint named by the
    /// `CADENZA_REFINE_*` environment variables.
    pub refine: bool,
}

impl Default for TextSettings {
    fn default() -> Self {
        Self {
            samples: 8000,
            synth: SynthConfig::default(),
            refine: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextStage {
    pub model: UnderstandingConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MusicStage {
    pub model: ComposerConfig,
    pub train: ComposerTrainConfig,
}

impl Default for MusicStage {
    fn default() -> Self {
        Self {
            model: ComposerConfig {
                d_model: 64,
                layers: 2,
                max_len: 512,
                ..ComposerConfig::default()
            },
            train: ComposerTrainConfig {
                epochs: 6,
                ..ComposerTrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Clips kept out of composer training and used as generation requests.
    pub held_out_clips: usize,
    /// Chance that each attribute of a held-out clip stays in its request.
    pub keep_prob: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            held_out_clips: 100,
            keep_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for data preparation and held-out selection.
    pub seed: u64,
    pub paths: Paths,
    pub extraction: ExtractionConfig,
    pub clips: ClipSettings,
    pub text: TextSettings,
    pub text2attr: TextStage,
    pub attr2music: MusicStage,
    pub sampler: SamplerConfig,
    pub evaluation: EvalSettings,
}

impl PipelineConfig {
    /// Reads and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate().context("[extraction]")?;
        self.sampler.validate().context("[sampler]")?;
        self.text.synth.balance_state().context("[text.synth]")?;
        let (lo, hi) = self.text.synth.k_range;
        if lo == 0 || lo > hi {
            bail!("[text.synth] k_range must satisfy 1 <= low <= high, got ({lo}, {hi})");
        }
        if self.clips.max_bars == 0 {
            bail!("[clips] max_bars must be positive");
        }
        if !(0.0..=1.0).contains(&self.evaluation.keep_prob) {
            bail!("[evaluation] keep_prob must lie in [0, 1]");
        }
        for (name, f) in [
            ("text2attr.train", self.text2attr.train.valid_fraction),
            ("attr2music.train", self.attr2music.train.valid_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                bail!("[{name}] valid_fraction must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.text2attr.train.seed = seed;
        self.attr2music.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }

    // Each artifact records the digest of the settings it depends on, so
    // changing, say, the sampler does not flag trained checkpoints as stale.

    pub fn clips_digest(&self) -> String {
        config_digest(&(
            self.seed,
            &self.paths.midi_dir,
            &self.paths.labels,
            &self.extraction,
            &self.clips,
        ))
    }

    pub fn text_digest(&self) -> String {
        config_digest(&(self.seed, &self.paths.templates, &self.text))
    }

    pub fn text2attr_digest(&self) -> String {
        config_digest(&(self.text_digest(), &self.text2attr))
    }

    pub fn attr2music_digest(&self) -> String {
        config_digest(&(
            self.clips_digest(),
            self.evaluation.held_out_clips,
            &self.attr2music,
        ))
    }
}

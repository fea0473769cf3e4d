//! Run configuration.
//!
//! A config file is a JSON object deep-merged over the defaults of the chosen
//! `preset`. Keys absent from the defaults are rejected with their dotted path,
//! as are values of the wrong type. Training seeds are not configurable per
//! stage: the top-level `seed` drives model initialization and every training
//! stream.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use duin_core::config::{self as presets, TrainConfig};
use duin_core::downstream::InitMode;
use duin_core::encoder::EncoderConfig;
use duin_core::preprocess::FilterSpec;
use duin_core::quantizer::QuantizerConfig;
use duin_core::signal::{SplitSpec, SyntheticSpec};
use duin_core::vqvae::RegressorConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Preprocess,
    TrainVqvae,
    TrainMae,
    Finetune,
    Eval,
    Contrib,
    Gradcheck,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Synth, Stage::Preprocess, Stage::TrainVqvae, Stage::TrainMae, Stage::Finetune, Stage::Eval, Stage::Contrib, Stage::Gradcheck];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::TrainVqvae => "train-vqvae",
            Stage::TrainMae => "train-mae",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Contrib => "contrib",
            Stage::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config { key: "stage".into(), msg: format!("unknown stage `{s}`") })
    }
}

/// Model and schedule scale used for defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// The reference geometry and optimizer settings.
    #[default]
    Full,
    /// d = 64, codex 256×32, 30-epoch schedules: trains on a CPU in minutes.
    Desk,
    /// Smallest geometry that exercises every code path; for smoke tests.
    Tiny,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Input recording (`.duin` with its `.json` manifest).
    pub recording: Option<PathBuf>,
    pub vqvae: Option<PathBuf>,
    pub mae: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeBlock {
    pub mask_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierBlock {
    pub hidden: usize,
    /// 0 takes the count from the recording's label names.
    pub n_classes: usize,
    pub init: InitMode,
    pub window_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContribBlock {
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckBlock {
    pub h: f64,
    pub tolerance: f64,
}

/// One-at-a-time ablation lists; each value runs the stage once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub codex_size: Vec<usize>,
    pub codex_dim: Vec<usize>,
    pub mask_ratio: Vec<f64>,
    /// Epochs of the pretraining stage being run.
    pub pretrain_epochs: Vec<usize>,
}

impl SweepBlock {
    pub fn is_empty(&self) -> bool {
        self.codex_size.is_empty() && self.codex_dim.is_empty() && self.mask_ratio.is_empty() && self.pretrain_epochs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Option<Stage>,
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticSpec,
    pub preprocess: FilterSpec,
    /// `n_channels` 0 takes the count from the recording.
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub regressor: RegressorConfig,
    pub mae: MaeBlock,
    pub classifier: ClassifierBlock,
    pub split: SplitSpec,
    pub train_vqvae: TrainConfig,
    pub train_mae: TrainConfig,
    pub finetune: TrainConfig,
    pub contrib: ContribBlock,
    pub gradcheck: GradcheckBlock,
    pub sweep: SweepBlock,
}

const TRAIN_BLOCKS: [&str; 3] = ["train_vqvae", "train_mae", "finetune"];

/// Schedule used by the desk preset for every stage.
fn desk_schedule(batch_size: usize, weight_decay: f64, augment: bool) -> TrainConfig {
    TrainConfig { batch_size, max_lr: 1e-3, min_lr: 1e-4, weight_decay, epochs: 30, warmup_epochs: 3, seed: 0, augment }
}

fn tiny_schedule(augment: bool) -> TrainConfig {
    TrainConfig { batch_size: 4, max_lr: 1e-3, min_lr: 1e-4, weight_decay: 0.01, epochs: 2, warmup_epochs: 1, seed: 0, augment }
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        let vq = match preset {
            Preset::Full => presets::full_vqvae(0),
            Preset::Desk => presets::desk_vqvae(0),
            Preset::Tiny => presets::tiny_vqvae(0),
        };
        let (train_vqvae, train_mae, finetune) = match preset {
            Preset::Full => (TrainConfig::vqvae(), TrainConfig::mae(), TrainConfig::classifier()),
            Preset::Desk => (desk_schedule(16, 0.01, false), desk_schedule(16, 0.05, false), desk_schedule(32, 0.05, true)),
            Preset::Tiny => (tiny_schedule(false), tiny_schedule(false), tiny_schedule(true)),
        };
        let synth = match preset {
            Preset::Tiny => SyntheticSpec { n_classes: 2, n_trials_per_class: 6, ..SyntheticSpec::default() },
            _ => SyntheticSpec::default(),
        };
        // The tiny encoder has W = 10 and at most 40 patches, so 4 s windows need 100 Hz.
        let preprocess = match preset {
            Preset::Tiny => FilterSpec { target_rate_hz: 100.0, ..FilterSpec::default() },
            _ => FilterSpec::default(),
        };
        Self {
            stage: None,
            preset,
            seed: 0,
            paths: Paths::default(),
            synth,
            preprocess,
            encoder: vq.encoder,
            quantizer: vq.quantizer,
            regressor: vq.regressor,
            mae: MaeBlock { mask_ratio: presets::DEFAULT_MASK_RATIO },
            classifier: ClassifierBlock { hidden: 128, n_classes: 0, init: InitMode::Random, window_seconds: 3.0 },
            split: SplitSpec::default(),
            train_vqvae,
            train_mae,
            finetune,
            contrib: ContribBlock { top_k: 10 },
            gradcheck: GradcheckBlock { h: 1e-4, tolerance: 1e-4 },
            sweep: SweepBlock::default(),
        }
    }

    /// Defaults as JSON, minus the keys users may not set.
    fn defaults_value(preset: Preset) -> Value {
        let mut v = serde_json::to_value(Self::defaults(preset)).expect("config serializes");
        for block in TRAIN_BLOCKS {
            v[block].as_object_mut().expect("train block").remove("seed");
        }
        v
    }

    /// Merges `user` over the defaults of its `preset` and validates the result.
    pub fn from_value(user: Value) -> Result<Self> {
        let Value::Object(user) = user else {
            return Err(Error::Config { key: "<root>".into(), msg: "config must be a JSON object".into() });
        };
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config { key: "preset".into(), msg: e.to_string() })?,
        };
        let mut merged = Self::defaults_value(preset);
        merge(&mut merged, &user, "")?;
        for block in TRAIN_BLOCKS {
            merged[block]["seed"] = Value::from(0u64);
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(merged)
            .map_err(|e| Error::Config { key: e.path().to_string(), msg: e.inner().to_string() })?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// An empty file counts as `{}`.
    pub fn from_str_json(text: &str) -> Result<Self> {
        let value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config { key: "<root>".into(), msg: e.to_string() })?
        };
        Self::from_value(value)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        Self::from_str_json(&text)
    }

    pub fn apply_seed(&mut self) {
        for t in [&mut self.train_vqvae, &mut self.train_mae, &mut self.finetune] {
            t.seed = self.seed;
        }
    }

    /// Constraint checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        fn key(k: &str) -> impl FnOnce(duin_core::Error) -> Error + '_ {
            move |e| Error::Config { key: k.into(), msg: e.to_string() }
        }
        let m = self.mae.mask_ratio;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config { key: "mae.mask_ratio".into(), msg: format!("must lie in (0, 1), got {m}") });
        }
        for r in &self.sweep.mask_ratio {
            if !(*r > 0.0 && *r < 1.0) {
                return Err(Error::Config { key: "sweep.mask_ratio".into(), msg: format!("must lie in (0, 1), got {r}") });
            }
        }
        self.quantizer.validate().map_err(key("quantizer"))?;
        self.train_vqvae.validate().map_err(key("train_vqvae"))?;
        self.train_mae.validate().map_err(key("train_mae"))?;
        self.finetune.validate().map_err(key("finetune"))?;
        self.split.validate().map_err(key("split"))?;
        if self.classifier.hidden == 0 {
            return Err(Error::Config { key: "classifier.hidden".into(), msg: "must be positive".into() });
        }
        if self.classifier.window_seconds.is_nan() || self.classifier.window_seconds <= 0.0 {
            return Err(Error::Config { key: "classifier.window_seconds".into(), msg: "must be positive".into() });
        }
        if self.contrib.top_k == 0 {
            return Err(Error::Config { key: "contrib.top_k".into(), msg: "must be positive".into() });
        }
        if !(self.gradcheck.h > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config { key: "gradcheck".into(), msg: "h and tolerance must be positive".into() });
        }
        let paths = [("paths.recording", &self.paths.recording), ("paths.vqvae", &self.paths.vqvae), ("paths.mae", &self.paths.mae), ("paths.classifier", &self.paths.classifier)];
        for (k, p) in paths {
            if let Some(p) = p.as_ref().filter(|p| !p.exists()) {
                return Err(Error::Config { key: k.into(), msg: format!("{} does not exist", p.display()) });
            }
        }
        Ok(())
    }

    /// Encoder geometry for a recording with `n_channels` channels.
    pub fn encoder_for(&self, n_channels: usize) -> Result<EncoderConfig> {
        if self.encoder.n_channels != 0 && self.encoder.n_channels != n_channels {
            return Err(Error::Config {
                key: "encoder.n_channels".into(),
                msg: format!("configured {} but the recording has {n_channels}", self.encoder.n_channels),
            });
        }
        Ok(EncoderConfig { n_channels, ..self.encoder.clone() })
    }
}

/// Recursive object merge. Only keys present in `base` may appear in `over`.
fn merge(base: &mut Value, over: &Map<String, Value>, path: &str) -> Result<()> {
    let Value::Object(base) = base else { unreachable!("merge targets objects only") };
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let Some(slot) = base.get_mut(k) else {
            return Err(Error::Config { key, msg: "unknown key".into() });
        };
        match (slot.is_object(), v) {
            (true, Value::Object(inner)) => merge(slot, inner, &key)?,
            _ => *slot = v.clone(),
        }
    }
    Ok(())
}

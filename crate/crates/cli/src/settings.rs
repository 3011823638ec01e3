//! Run settings: defaults, then a `key = value` config file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use depthmotion::evaluator::DEFAULT_CAP;
use depthmotion::losses::LossWeights;
use depthmotion::trainer::{Mode, RefineConfig, TrainConfig};
use depthmotion::{Error, Result};

/// Scene family written by `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Rigid,
    Dynamic,
    Degenerate,
    Shifted,
    Sequence,
    ShiftedSequence,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Rigid => "rigid",
            Preset::Dynamic => "dynamic",
            Preset::Degenerate => "degenerate",
            Preset::Shifted => "shifted",
            Preset::Sequence => "sequence",
            Preset::ShiftedSequence => "shifted-sequence",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rigid" => Preset::Rigid,
            "dynamic" => Preset::Dynamic,
            "degenerate" => Preset::Degenerate,
            "shifted" => Preset::Shifted,
            "sequence" => Preset::Sequence,
            "shifted-sequence" => Preset::ShiftedSequence,
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {s:?} (rigid, dynamic, degenerate, shifted, sequence, shifted-sequence)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub steps: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Mode,
    pub refine_steps: usize,
    pub median_scale: bool,
    pub cap: f64,
    pub count: usize,
    pub preset: Preset,
    pub height: usize,
    pub width: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub calibrate_priors: bool,
    pub refine_learning_rate: f64,
    pub static_threshold: f64,
    pub flip: bool,
    pub carry_over: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let refine = RefineConfig::default();
        Self {
            seed: 0,
            steps: train.steps,
            dataset: None,
            checkpoint: None,
            out: None,
            mode: Mode::Baseline,
            refine_steps: refine.steps,
            median_scale: true,
            cap: DEFAULT_CAP,
            count: 100,
            preset: Preset::Rigid,
            height: 128,
            width: 416,
            sequence_length: 7,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            weights: train.weights,
            calibrate_priors: train.calibrate_priors,
            refine_learning_rate: refine.learning_rate,
            static_threshold: refine.static_threshold,
            flip: refine.flip,
            carry_over: refine.carry_over,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// `on`/`off` as well as `true`/`false`.
pub fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on or off, got {value:?}"))),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "mode" => self.mode = value.parse()?,
            "refine_steps" => self.refine_steps = parse(key, value)?,
            "median_scale" => self.median_scale = parse_switch(value)?,
            "cap" => self.cap = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "preset" => self.preset = value.parse()?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "sequence_length" => self.sequence_length = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "reconstruction_weight" => self.weights.reconstruction = parse(key, value)?,
            "ssim_weight" => self.weights.ssim = parse(key, value)?,
            "smoothness_weight" => self.weights.smoothness = parse(key, value)?,
            "size_weight" => self.weights.size_constraint = parse(key, value)?,
            "l2_reg" => self.weights.l2_reg = parse(key, value)?,
            "calibrate_priors" => self.calibrate_priors = parse_switch(value)?,
            "refine_learning_rate" => self.refine_learning_rate = parse(key, value)?,
            "static_threshold" => self.static_threshold = parse(key, value)?,
            "flip" => self.flip = parse_switch(value)?,
            "carry_over" => self.carry_over = parse_switch(value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(path, &text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weights: self.weights,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            mode: self.mode,
            calibrate_priors: self.calibrate_priors,
            ..TrainConfig::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            steps: self.refine_steps,
            learning_rate: self.refine_learning_rate,
            carry_over: self.carry_over,
            flip: self.flip,
            static_threshold: self.static_threshold,
            mode: self.mode,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap.is_finite() && self.cap > 0.0) {
            return Err(Error::Config(format!("cap must be positive, got {}", self.cap)));
        }
        if !(self.static_threshold.is_finite() && self.static_threshold >= 0.0) {
            return Err(Error::Config("static_threshold must be >= 0".into()));
        }
        self.train_config().validate()?;
        self.refine_config().validate()
    }
}

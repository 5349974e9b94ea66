//! Plain-text `key = value` run configuration shared by every command.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::{LoopConfig, DEFAULT_DRIFT_WINDOW};
use crate::error::{Error, Result};
use crate::model::{BlockVariant, ModelConfig};
use crate::rolling::{Conditioning, SamplerConfig};
use crate::schedule::ScheduleConfig;
use crate::toydata::ToyGeometry;
use crate::training::TrainConfig;

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "channels",
    "height",
    "width",
    "segments_per_frame",
    "mel_bins",
    "class_count",
    "class_conditional",
    "patch",
    "hidden",
    "heads",
    "blocks",
    "mlp_ratio",
    "variant",
    "freq_dim",
    "joint_layers",
    "window",
    "theta",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "steps",
    "seed",
    "steps_per_frame",
    "conditioning",
    "class",
    "sample_seed",
    "loop_threshold",
    "fft_pad",
    "min_repeats",
    "drift_window",
    "drift_stride",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: ToyGeometry,
    pub class_conditional: bool,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub variant: BlockVariant,
    pub freq_dim: usize,
    pub joint_layers: usize,
    pub window: usize,
    pub theta: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub steps_per_frame: usize,
    pub conditioning: Conditioning,
    pub class: Option<usize>,
    pub sample_seed: u64,
    pub loop_threshold: f64,
    pub fft_pad: usize,
    pub min_repeats: f64,
    pub drift_window: usize,
    pub drift_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sampler = SamplerConfig::default();
        let lp = LoopConfig::default();
        Self {
            geometry: ToyGeometry::default(),
            class_conditional: true,
            patch: 2,
            hidden: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            variant: BlockVariant::TemporalAveragePlusCond,
            freq_dim: 64,
            joint_layers: 2,
            window: train.schedule.window,
            theta: train.schedule.theta,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            batch_size: 8,
            steps: train.steps,
            seed: 0,
            steps_per_frame: sampler.steps_per_frame,
            conditioning: Conditioning::None,
            class: None,
            sample_seed: 0,
            loop_threshold: lp.threshold,
            fft_pad: lp.pad_factor,
            min_repeats: lp.min_repeats,
            drift_window: DEFAULT_DRIFT_WINDOW,
            drift_stride: DEFAULT_DRIFT_WINDOW,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn show(v: impl Display) -> String {
    v.to_string()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let g = &mut self.geometry;
        match key {
            "channels" => g.channels = parse(key, v)?,
            "height" => g.height = parse(key, v)?,
            "width" => g.width = parse(key, v)?,
            "segments_per_frame" => g.segments_per_frame = parse(key, v)?,
            "mel_bins" => g.mel_bins = parse(key, v)?,
            "class_count" => g.class_count = parse(key, v)?,
            "class_conditional" => self.class_conditional = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "variant" => self.variant = BlockVariant::from_tag(v)?,
            "freq_dim" => self.freq_dim = parse(key, v)?,
            "joint_layers" => self.joint_layers = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps_per_frame" => self.steps_per_frame = parse(key, v)?,
            "conditioning" => self.conditioning = Conditioning::parse(v)?,
            "class" => self.class = if v == "none" { None } else { Some(parse(key, v)?) },
            "sample_seed" => self.sample_seed = parse(key, v)?,
            "loop_threshold" => self.loop_threshold = parse(key, v)?,
            "fft_pad" => self.fft_pad = parse(key, v)?,
            "min_repeats" => self.min_repeats = parse(key, v)?,
            "drift_window" => self.drift_window = parse(key, v)?,
            "drift_stride" => self.drift_stride = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.geometry;
        Some(match key {
            "channels" => show(g.channels),
            "height" => show(g.height),
            "width" => show(g.width),
            "segments_per_frame" => show(g.segments_per_frame),
            "mel_bins" => show(g.mel_bins),
            "class_count" => show(g.class_count),
            "class_conditional" => show(self.class_conditional),
            "patch" => show(self.patch),
            "hidden" => show(self.hidden),
            "heads" => show(self.heads),
            "blocks" => show(self.blocks),
            "mlp_ratio" => show(self.mlp_ratio),
            "variant" => show(self.variant),
            "freq_dim" => show(self.freq_dim),
            "joint_layers" => show(self.joint_layers),
            "window" => show(self.window),
            "theta" => show(self.theta),
            "learning_rate" => show(self.learning_rate),
            "beta1" => show(self.beta1),
            "beta2" => show(self.beta2),
            "epsilon" => show(self.epsilon),
            "batch_size" => show(self.batch_size),
            "steps" => show(self.steps),
            "seed" => show(self.seed),
            "steps_per_frame" => show(self.steps_per_frame),
            "conditioning" => show(self.conditioning.tag()),
            "class" => self.class.map_or_else(|| "none".into(), show),
            "sample_seed" => show(self.sample_seed),
            "loop_threshold" => show(self.loop_threshold),
            "fft_pad" => show(self.fft_pad),
            "min_repeats" => show(self.min_repeats),
            "drift_window" => show(self.drift_window),
            "drift_stride" => show(self.drift_stride),
            _ => return None,
        })
    }

    /// Defaults overridden by the file's assignments. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", no + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.train().validate()?;
        self.sampler().validate()?;
        if self.drift_window == 0 || self.drift_stride == 0 {
            return Err(Error::Config("drift_window and drift_stride must be positive".into()));
        }
        if !(self.loop_threshold >= 0.0) || self.fft_pad == 0 || !(self.min_repeats >= 1.0) {
            return Err(Error::Config("loop_threshold >= 0, fft_pad >= 1 and min_repeats >= 1 required".into()));
        }
        if let Some(c) = self.class {
            if !self.class_conditional || c >= self.geometry.class_count {
                return Err(Error::Config(format!("class {c} not available for this model")));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        let g = &self.geometry;
        ModelConfig {
            channels: g.channels,
            height: g.height,
            width: g.width,
            patch: self.patch,
            segments_per_frame: g.segments_per_frame,
            mel_bins: g.mel_bins,
            hidden: self.hidden,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            variant: self.variant,
            class_count: self.class_conditional.then_some(g.class_count),
            freq_dim: self.freq_dim,
            joint_layers: self.joint_layers,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            schedule: ScheduleConfig { window: self.window, theta: self.theta },
            model: self.model(),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            window: self.window,
            steps_per_frame: self.steps_per_frame,
            conditioning: self.conditioning,
            class: self.class,
            seed: self.sample_seed,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig { threshold: self.loop_threshold, pad_factor: self.fft_pad, min_repeats: self.min_repeats }
    }
}

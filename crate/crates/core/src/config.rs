//! Flat `key=value` run configuration.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::loss::{LossKind, LossWeights};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::tape::Resize;
use crate::unet::{UNetConfig, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricUnit {
    Meters,
    Centimeters,
}

impl MetricUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricUnit::Meters => "m",
            MetricUnit::Centimeters => "cm",
        }
    }

    /// Multiplier from meters.
    pub fn factor(self) -> f64 {
        match self {
            MetricUnit::Meters => 1.0,
            MetricUnit::Centimeters => 100.0,
        }
    }
}

impl FromStr for MetricUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(MetricUnit::Meters),
            "cm" => Ok(MetricUnit::Centimeters),
            _ => Err(Error::Config(format!("metric_unit must be m or cm, got {s:?}"))),
        }
    }
}

/// Every tunable of a run. Defaults are the full-scale settings; see
/// [`Config::desk`] for the small preset.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub height: usize,
    pub width: usize,
    pub enc_channels: [usize; LEVELS],
    pub feature_channels: usize,
    pub attention: bool,
    pub attention_dim: usize,
    pub attention_height: usize,
    pub attention_width: usize,
    pub attention_mask_resize: Resize,
    pub mask_resize: Resize,
    pub fusion_channels: usize,
    pub se_reduction: usize,
    pub head_channels: usize,
    pub depth_scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Step budget; 0 means `epochs` full passes.
    pub max_steps: u64,
    pub seed: u64,
    pub keep_prob: f64,
    pub resample_sparsity: bool,
    pub lambda_init: f64,
    pub lambda_obj: f64,
    pub lambda_seg: f64,
    pub loss: LossKind,
    pub log_every: u64,
    pub metric_unit: MetricUnit,
}

impl Default for Config {
    fn default() -> Self {
        let w = LossWeights::default();
        Config {
            height: 256,
            width: 512,
            enc_channels: [8, 16, 32, 64, 128],
            feature_channels: 8,
            attention: true,
            attention_dim: 32,
            attention_height: 16,
            attention_width: 32,
            attention_mask_resize: Resize::Bilinear,
            mask_resize: Resize::Nearest,
            fusion_channels: 128,
            se_reduction: 16,
            head_channels: 64,
            depth_scale: 80.0,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 100,
            max_steps: 0,
            seed: 0,
            keep_prob: 0.05,
            resample_sparsity: false,
            lambda_init: w.lambda_init,
            lambda_obj: w.lambda_obj,
            lambda_seg: w.lambda_seg,
            loss: LossKind::L1,
            log_every: 50,
            metric_unit: MetricUnit::Meters,
        }
    }
}

const KEYS: &[&str] = &[
    "height",
    "width",
    "enc_channels",
    "feature_channels",
    "attention",
    "attention_dim",
    "attention_height",
    "attention_width",
    "attention_mask_resize",
    "mask_resize",
    "fusion_channels",
    "se_reduction",
    "head_channels",
    "depth_scale",
    "learning_rate",
    "batch_size",
    "epochs",
    "max_steps",
    "seed",
    "keep_prob",
    "resample_sparsity",
    "lambda_init",
    "lambda_obj",
    "lambda_seg",
    "loss",
    "log_every",
    "metric_unit",
];

fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn resize(key: &str, v: &str) -> Result<Resize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected nearest or bilinear, got {v:?}")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl Config {
    /// 64×128, 500 steps; everything else at the defaults.
    pub fn desk() -> Self {
        Config {
            height: 64,
            width: 128,
            max_steps: 500,
            ..Config::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Config::default()),
            "desk" => Ok(Config::desk()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "enc_channels" => {
                let parts = v.split(',').map(|p| num(key, p.trim())).collect::<Result<Vec<usize>>>()?;
                self.enc_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("enc_channels needs {LEVELS} values, got {v:?}")))?;
            }
            "feature_channels" => self.feature_channels = num(key, v)?,
            "attention" => self.attention = flag(key, v)?,
            "attention_dim" => self.attention_dim = num(key, v)?,
            "attention_height" => self.attention_height = num(key, v)?,
            "attention_width" => self.attention_width = num(key, v)?,
            "attention_mask_resize" => self.attention_mask_resize = resize(key, v)?,
            "mask_resize" => self.mask_resize = resize(key, v)?,
            "fusion_channels" => self.fusion_channels = num(key, v)?,
            "se_reduction" => self.se_reduction = num(key, v)?,
            "head_channels" => self.head_channels = num(key, v)?,
            "depth_scale" => self.depth_scale = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "keep_prob" => self.keep_prob = num(key, v)?,
            "resample_sparsity" => self.resample_sparsity = flag(key, v)?,
            "lambda_init" => self.lambda_init = num(key, v)?,
            "lambda_obj" => self.lambda_obj = num(key, v)?,
            "lambda_seg" => self.lambda_seg = num(key, v)?,
            "loss" => self.loss = v.parse().map_err(|_| Error::Config(format!("loss: expected l1 or l2, got {v:?}")))?,
            "log_every" => self.log_every = num(key, v)?,
            "metric_unit" => self.metric_unit = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        let mut seen: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
            seen.push(k.to_string());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Config::default().apply(text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "enc_channels" => {
                let parts: Vec<String> = self.enc_channels.iter().map(ToString::to_string).collect();
                parts.join(",")
            }
            "feature_channels" => self.feature_channels.to_string(),
            "attention" => on_off(self.attention).into(),
            "attention_dim" => self.attention_dim.to_string(),
            "attention_height" => self.attention_height.to_string(),
            "attention_width" => self.attention_width.to_string(),
            "attention_mask_resize" => self.attention_mask_resize.as_str().into(),
            "mask_resize" => self.mask_resize.as_str().into(),
            "fusion_channels" => self.fusion_channels.to_string(),
            "se_reduction" => self.se_reduction.to_string(),
            "head_channels" => self.head_channels.to_string(),
            "depth_scale" => self.depth_scale.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "keep_prob" => self.keep_prob.to_string(),
            "resample_sparsity" => on_off(self.resample_sparsity).into(),
            "lambda_init" => self.lambda_init.to_string(),
            "lambda_obj" => self.lambda_obj.to_string(),
            "lambda_seg" => self.lambda_seg.to_string(),
            "loss" => self.loss.as_str().into(),
            "log_every" => self.log_every.to_string(),
            "metric_unit" => self.metric_unit.as_str().into(),
            _ => return None,
        };
        Some(v)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// All keys, one `key=value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("every listed key has a value"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let div = 1 << (LEVELS - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return bad(format!("resolution {}×{} must be positive and divisible by {div}", self.height, self.width));
        }
        if self.enc_channels.iter().any(|&c| c == 0) || self.feature_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.attention_dim == 0 || self.attention_height == 0 || self.attention_width == 0 {
            return bad("attention dimension and working extents must be positive".into());
        }
        if self.fusion_channels == 0 || self.head_channels == 0 {
            return bad("fusion and head channels must be positive".into());
        }
        if self.se_reduction == 0 || self.fusion_channels % self.se_reduction != 0 {
            return bad(format!(
                "fusion_channels {} must be divisible by se_reduction {}",
                self.fusion_channels, self.se_reduction
            ));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad("depth_scale must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("one of epochs or max_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return bad("keep_prob must be in [0, 1]".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_init: self.lambda_init,
            lambda_obj: self.lambda_obj,
            lambda_seg: self.lambda_seg,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            unet: UNetConfig {
                enc_channels: self.enc_channels,
                feature_channels: self.feature_channels,
                depth_scale: self.depth_scale,
            },
            attention: AttentionConfig {
                dim: self.attention_dim,
                height: self.attention_height,
                width: self.attention_width,
                mask_resize: self.attention_mask_resize,
                enabled: self.attention,
            },
            mask_resize: self.mask_resize,
            fusion_channels: self.fusion_channels,
            head: HeadConfig {
                reduction: self.se_reduction,
                mid_channels: self.head_channels,
                depth_scale: self.depth_scale,
            },
        }
    }

    /// Steps the run takes for a training set of `n_train` samples.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            (self.epochs * n_train.div_ceil(self.batch_size)) as u64
        }
    }
}

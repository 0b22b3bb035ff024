//! Run configuration as plain `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PixelLossConfig};
use crate::model::{ModelConfig, ViewMode};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "MVANET_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Optimizer steps; 0 derives the count from `epochs`.
    pub steps: usize,
    /// Images whose gradients are summed into one optimizer step.
    pub accumulate: usize,
    pub seed: u64,
    pub augment: bool,
    pub log_every: usize,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 80,
            steps: 0,
            accumulate: 1,
            seed: 0,
            augment: true,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub pixel: PixelLossConfig,
    pub train: TrainConfig,
    /// Training dataset root.
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            pixel: PixelLossConfig::default(),
            train: TrainConfig::default(),
            data: PathBuf::from("data"),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn parse_levels(key: &str, v: &str) -> Result<[usize; LEVELS]> {
    let l = parse_list(key, v)?;
    l.try_into()
        .map_err(|l: Vec<usize>| Error::Config(format!("{key}: expected {LEVELS} values, got {}", l.len())))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.image_size" => m.image_size = parse_num(key, v)?,
            "model.grid" => {
                let (r, c) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("{key}: expected RxC, got '{v}'")))?;
                m.grid_rows = parse_num(key, r.trim())?;
                m.grid_cols = parse_num(key, c.trim())?;
            }
            "model.encoder_widths" => m.encoder_widths = parse_levels(key, v)?,
            "model.encoder_strides" => m.encoder_strides = parse_levels(key, v)?,
            "model.dec_dim" => m.dec_dim = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.windows" => m.windows = parse_list(key, v)?,
            "model.fine_dim" => m.fine_dim = parse_num(key, v)?,
            "model.fine_cues" => m.fine_cues = parse_bool(key, v)?,
            "model.mclm" => m.mclm = parse_bool(key, v)?,
            "model.mcrm" => m.mcrm = parse_bool(key, v)?,
            "model.vrm" => m.vrm = parse_bool(key, v)?,
            "model.views" => m.views = ViewMode::parse(v)?,
            "loss.lambda_g" => self.loss.lambda_g = parse_num(key, v)?,
            "loss.lambda_a" => self.loss.lambda_a = parse_num(key, v)?,
            "loss.weighted_iou" => self.pixel.weighted_iou = parse_bool(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.beta1" => t.beta1 = parse_num(key, v)?,
            "train.beta2" => t.beta2 = parse_num(key, v)?,
            "train.eps" => t.eps = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.accumulate" => t.accumulate = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.log_every" => t.log_every = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "paths.data" => self.data = PathBuf::from(v),
            "paths.out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be finite and non-negative", t.lr)));
        }
        for (k, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} {b} must lie in [0,1)")));
            }
        }
        if t.eps <= 0.0 {
            return Err(Error::Config("train.eps must be positive".into()));
        }
        if t.accumulate == 0 {
            return Err(Error::Config("train.accumulate must be at least 1".into()));
        }
        if t.log_every == 0 {
            return Err(Error::Config("train.log_every must be at least 1".into()));
        }
        if self.loss.lambda_g < 0.0 || self.loss.lambda_a < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let lines = [
            format!("model.image_size = {}", m.image_size),
            format!("model.grid = {}x{}", m.grid_rows, m.grid_cols),
            format!("model.encoder_widths = {}", join(&m.encoder_widths)),
            format!("model.encoder_strides = {}", join(&m.encoder_strides)),
            format!("model.dec_dim = {}", m.dec_dim),
            format!("model.heads = {}", m.heads),
            format!("model.windows = {}", join(&m.windows)),
            format!("model.fine_dim = {}", m.fine_dim),
            format!("model.fine_cues = {}", m.fine_cues),
            format!("model.mclm = {}", m.mclm),
            format!("model.mcrm = {}", m.mcrm),
            format!("model.vrm = {}", m.vrm),
            format!("model.views = {}", m.views.name()),
            format!("loss.lambda_g = {:?}", self.loss.lambda_g),
            format!("loss.lambda_a = {:?}", self.loss.lambda_a),
            format!("loss.weighted_iou = {}", self.pixel.weighted_iou),
            format!("train.lr = {:?}", t.lr),
            format!("train.beta1 = {:?}", t.beta1),
            format!("train.beta2 = {:?}", t.beta2),
            format!("train.eps = {:?}", t.eps),
            format!("train.epochs = {}", t.epochs),
            format!("train.steps = {}", t.steps),
            format!("train.accumulate = {}", t.accumulate),
            format!("train.seed = {}", t.seed),
            format!("train.augment = {}", t.augment),
            format!("train.log_every = {}", t.log_every),
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("paths.data = {}", self.data.display()),
            format!("paths.out = {}", self.out.display()),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Optimizer steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.train.steps > 0 {
            self.train.steps
        } else {
            self.train.epochs * n.div_ceil(self.train.accumulate)
        }
    }
}

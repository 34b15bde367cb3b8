//! Run configuration and its flat `key = value` file format.
//!
//! Keys are dotted (`partition.theta`). Blank lines and `#` comments are
//! ignored, unknown keys are rejected, and [`RunConfig::dump`] writes every
//! key so that `parse(dump(cfg)) == cfg` holds exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderProfile {
    /// Desk-scale encoder with channels `{16, 32, 64, 128}`.
    Toy,
    /// Contract of the pretrained backbone: channels `{256, 512, 1024, 2048}`.
    PaperShape,
}

impl EncoderProfile {
    pub fn name(self) -> &'static str {
        match self {
            EncoderProfile::Toy => "toy",
            EncoderProfile::PaperShape => "paper_shape",
        }
    }

    pub fn default_channels(self) -> [usize; 4] {
        match self {
            EncoderProfile::Toy => [16, 32, 64, 128],
            EncoderProfile::PaperShape => [256, 512, 1024, 2048],
        }
    }

    /// Common width of the decoder branches and gated features.
    pub fn default_width(self) -> usize {
        match self {
            EncoderProfile::Toy => 64,
            EncoderProfile::PaperShape => 256,
        }
    }
}

impl FromStr for EncoderProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(EncoderProfile::Toy),
            "paper_shape" => Ok(EncoderProfile::PaperShape),
            other => Err(Error::Config(format!("unknown encoder profile `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Soft,
    Hard,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(PartitionMode::Soft),
            "hard" => Ok(PartitionMode::Hard),
            other => Err(Error::Config(format!("unknown partition mode `{other}`"))),
        }
    }
}

/// How the early map is split into strong and weak regions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    /// Decision threshold on the early probability map (hard mode).
    pub theta: f64,
    /// Half-width of the uncertainty band around 0.5 (hard mode).
    pub band: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Soft,
            theta: 0.5,
            band: 0.1,
        }
    }
}

impl PartitionConfig {
    pub fn hard(theta: f64, band: f64) -> Result<Self> {
        let cfg = Self {
            mode: PartitionMode::Hard,
            theta,
            band,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("partition.theta {} outside (0, 1)", self.theta)));
        }
        if !(self.band > 0.0 && self.band < 0.5) {
            return Err(Error::Config(format!("partition.band {} outside (0, 0.5)", self.band)));
        }
        if self.theta + self.band > 1.0 || self.band >= self.theta {
            return Err(Error::Config(format!(
                "partition needs theta + band <= 1 and band < theta (theta {}, band {})",
                self.theta, self.band
            )));
        }
        Ok(())
    }
}

/// Per-output weights of the total training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionWeights {
    pub final_mask: f64,
    pub early: f64,
    pub bs: f64,
    pub os: f64,
}

impl Default for SupervisionWeights {
    fn default() -> Self {
        Self {
            final_mask: 1.0,
            early: 1.0,
            bs: 0.5,
            os: 0.5,
        }
    }
}

/// Weights of the active-contour and cross-entropy objective.
///
/// None of the defaults come from a published training recipe; they are
/// region-fitting conventions (`c1 = 1`, `c2 = 0`) and a light length term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Length weight.
    pub alpha: f64,
    /// Curvature weight.
    pub beta: f64,
    /// Region-balance weight.
    pub lambda: f64,
    /// Target intensity inside the object.
    pub c1: f64,
    /// Target intensity outside the object.
    pub c2: f64,
    /// Clamp for logarithms and the curvature denominator.
    pub epsilon: f64,
    pub weights: SupervisionWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1.0,
            lambda: 1.0,
            c1: 1.0,
            c2: 0.0,
            epsilon: 1e-7,
            weights: SupervisionWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [self.alpha, self.beta, self.lambda, w.final_mask, w.early, w.bs, w.os]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return Err(Error::Config(format!("loss.epsilon {} outside (0, 0.1)", self.epsilon)));
        }
        if !(self.c1 > self.c2) {
            return Err(Error::Config(format!(
                "loss.c1 ({}) must exceed loss.c2 ({})",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
    /// Iterations of linear warmup before the schedule starts.
    pub warmup: usize,
    /// `synthetic` or `paper` (Kvasir-Seg + CVC-ClinicDB split).
    pub dataset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            iterations: 1000,
            checkpoint_every: 100,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: LrSchedule::Constant,
            warmup: 0,
            dataset: "synthetic".into(),
        }
    }
}

/// Learning-rate schedule over `train.iterations`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    /// Rate for the step that starts after `done` of `total` iterations,
    /// ramping up linearly over the first `warmup` steps.
    pub fn rate(self, base: f64, done: u64, total: u64, warmup: u64) -> f64 {
        if done < warmup {
            return base * (done + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (done - warmup) as f64 / total.saturating_sub(warmup).max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown train.schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kvasir: Option<PathBuf>,
    pub clinicdb: Option<PathBuf>,
    pub etis: Option<PathBuf>,
    pub colondb: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kvasir: None,
            clinicdb: None,
            etis: None,
            colondb: None,
            synthetic_count: 8,
            synthetic_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub encoder_profile: EncoderProfile,
    pub channel_scheme: [usize; 4],
    /// Optional pretrained backbone weights for `paper_shape`.
    pub encoder_weights: Option<PathBuf>,
    pub decoder_width: usize,
    /// Channel-reduction ratio of the channel attention.
    pub reduction: usize,
    pub partition: PartitionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(EncoderProfile::Toy)
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "seed",
    "deterministic",
    "encoder.profile",
    "encoder.channels",
    "encoder.weights",
    "decoder.width",
    "attention.reduction",
    "partition.mode",
    "partition.theta",
    "partition.band",
    "loss.alpha",
    "loss.beta",
    "loss.lambda",
    "loss.c1",
    "loss.c2",
    "loss.epsilon",
    "loss.w_final",
    "loss.w_early",
    "loss.w_bs",
    "loss.w_os",
    "train.lr",
    "train.batch_size",
    "train.iterations",
    "train.checkpoint_every",
    "train.augment",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.schedule",
    "train.warmup",
    "train.dataset",
    "data.kvasir",
    "data.clinicdb",
    "data.etis",
    "data.colondb",
    "data.synthetic_count",
    "data.synthetic_size",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn for_profile(profile: EncoderProfile) -> Self {
        Self {
            image_size: 352,
            seed: 0,
            deterministic: false,
            encoder_profile: profile,
            channel_scheme: profile.default_channels(),
            encoder_weights: None,
            decoder_width: profile.default_width(),
            reduction: 4,
            partition: PartitionConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        // the profile picks the defaults for channel-dependent keys
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "encoder.profile")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(EncoderProfile::Toy);
        let mut cfg = Self::for_profile(profile);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "image_size" => self.image_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "encoder.profile" => self.encoder_profile = v.parse()?,
            "encoder.channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.channel_scheme = parts
                    .try_into()
                    .map_err(|_| Error::Config("encoder.channels needs exactly 4 values".into()))?;
            }
            "encoder.weights" => self.encoder_weights = parse_path(v),
            "decoder.width" => self.decoder_width = parse_num(key, v)?,
            "attention.reduction" => self.reduction = parse_num(key, v)?,
            "partition.mode" => self.partition.mode = v.parse()?,
            "partition.theta" => self.partition.theta = parse_num(key, v)?,
            "partition.band" => self.partition.band = parse_num(key, v)?,
            "loss.alpha" => self.loss.alpha = parse_num(key, v)?,
            "loss.beta" => self.loss.beta = parse_num(key, v)?,
            "loss.lambda" => self.loss.lambda = parse_num(key, v)?,
            "loss.c1" => self.loss.c1 = parse_num(key, v)?,
            "loss.c2" => self.loss.c2 = parse_num(key, v)?,
            "loss.epsilon" => self.loss.epsilon = parse_num(key, v)?,
            "loss.w_final" => self.loss.weights.final_mask = parse_num(key, v)?,
            "loss.w_early" => self.loss.weights.early = parse_num(key, v)?,
            "loss.w_bs" => self.loss.weights.bs = parse_num(key, v)?,
            "loss.w_os" => self.loss.weights.os = parse_num(key, v)?,
            "train.lr" => self.train.learning_rate = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.iterations" => self.train.iterations = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "train.beta1" => self.train.beta1 = parse_num(key, v)?,
            "train.beta2" => self.train.beta2 = parse_num(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse_num(key, v)?,
            "train.schedule" => self.train.schedule = v.parse()?,
            "train.warmup" => self.train.warmup = parse_num(key, v)?,
            "train.dataset" => self.train.dataset = v.to_string(),
            "data.kvasir" => self.data.kvasir = parse_path(v),
            "data.clinicdb" => self.data.clinicdb = parse_path(v),
            "data.etis" => self.data.etis = parse_path(v),
            "data.colondb" => self.data.colondb = parse_path(v),
            "data.synthetic_count" => self.data.synthetic_count = parse_num(key, v)?,
            "data.synthetic_size" => self.data.synthetic_size = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("decoder.width", self.decoder_width),
            ("attention.reduction", self.reduction),
            ("train.batch_size", self.train.batch_size),
            ("train.iterations", self.train.iterations),
            ("train.checkpoint_every", self.train.checkpoint_every),
            ("data.synthetic_count", self.data.synthetic_count),
            ("data.synthetic_size", self.data.synthetic_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if self.channel_scheme.contains(&0) {
            return Err(Error::Config("encoder.channels must be positive".into()));
        }
        if self.image_size % 32 != 0 || self.data.synthetic_size % 32 != 0 {
            return Err(Error::Config("image sizes must be divisible by 32".into()));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        if !matches!(t.dataset.as_str(), "synthetic" | "paper") {
            return Err(Error::Config(format!("unknown train.dataset `{}`", t.dataset)));
        }
        self.partition.validate()?;
        self.loss.validate()
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        let l = &self.loss;
        let t = &self.train;
        match key {
            "image_size" => self.image_size.to_string(),
            "seed" => self.seed.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "encoder.profile" => self.encoder_profile.name().to_string(),
            "encoder.channels" => self
                .channel_scheme
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "encoder.weights" => path_str(&self.encoder_weights),
            "decoder.width" => self.decoder_width.to_string(),
            "attention.reduction" => self.reduction.to_string(),
            "partition.mode" => match self.partition.mode {
                PartitionMode::Soft => "soft".into(),
                PartitionMode::Hard => "hard".into(),
            },
            "partition.theta" => self.partition.theta.to_string(),
            "partition.band" => self.partition.band.to_string(),
            "loss.alpha" => l.alpha.to_string(),
            "loss.beta" => l.beta.to_string(),
            "loss.lambda" => l.lambda.to_string(),
            "loss.c1" => l.c1.to_string(),
            "loss.c2" => l.c2.to_string(),
            "loss.epsilon" => l.epsilon.to_string(),
            "loss.w_final" => l.weights.final_mask.to_string(),
            "loss.w_early" => l.weights.early.to_string(),
            "loss.w_bs" => l.weights.bs.to_string(),
            "loss.w_os" => l.weights.os.to_string(),
            "train.lr" => t.learning_rate.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.schedule" => t.schedule.name().to_string(),
            "train.warmup" => t.warmup.to_string(),
            "train.dataset" => t.dataset.clone(),
            "data.kvasir" => path_str(&self.data.kvasir),
            "data.clinicdb" => path_str(&self.data.clinicdb),
            "data.etis" => path_str(&self.data.etis),
            "data.colondb" => path_str(&self.data.colondb),
            "data.synthetic_count" => self.data.synthetic_count.to_string(),
            "data.synthetic_size" => self.data.synthetic_size.to_string(),
            _ => unreachable!("KEYS and get() are kept in sync"),
        }
    }
}

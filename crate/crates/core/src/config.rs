//! Configuration: flat `key = value` files, `--set` overrides, validation,
//! and a canonical serialization used for round-tripping and checkpoints.
//!
//! Every architectural choice the method leaves open (widths, depths, head
//! counts) is a config key here, so scale is a config change, not a code
//! change. Defaults are small enough that end-to-end training runs on a CPU
//! in minutes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// How the frequency-attention correlation is formed. `Matrix` is the
/// literal reading of the attention equations (channel-by-channel matrix);
/// `Elementwise` is the per-frequency product / circular-correlation reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfaVariant {
    Matrix,
    Elementwise,
}

impl FfaVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FfaVariant::Matrix => "matrix",
            FfaVariant::Elementwise => "elementwise",
        }
    }
}

/// SSIM color handling: per-channel RGB average or luma only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    Rgb,
    Luma,
}

impl SsimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SsimMode::Rgb => "rgb",
            SsimMode::Luma => "luma",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Encoder ConvNext blocks after each of the three downsampling stages.
    pub blocks_per_level: [usize; 3],
    pub refiner_levels: usize,
    pub refiner_channels: usize,
    pub enable_unet_branch: bool,
    pub enable_dwtffc_branch: bool,
    pub enable_refiner: bool,
    pub ffa_heads: usize,
    pub ffa_variant: FfaVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            blocks_per_level: [2, 2, 2],
            refiner_levels: 3,
            refiner_channels: 32,
            enable_unet_branch: true,
            enable_dwtffc_branch: true,
            enable_refiner: true,
            ffa_heads: 1,
            ffa_variant: FfaVariant::Matrix,
        }
    }
}

/// The loss combination weights (alpha: MS-SSIM, beta: perceptual, gamma: adversarial).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.01, gamma: 0.0005 }
    }
}

/// Per-stage optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr1_start: f64,
    pub lr1_end: f64,
    pub lr2: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Stage 2 updates the removal network together with the refiner.
    pub stage2_joint: bool,
    /// Global-norm gradient clip; <= 0 disables.
    pub clip_norm: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            stage1_steps: 1500,
            stage2_steps: 500,
            lr1_start: 1e-4,
            lr1_end: 6.25e-6,
            lr2: 1e-5,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            stage2_joint: true,
            clip_norm: 1.0,
        }
    }
}

/// Augmentation controls.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub crop_size: usize,
    /// Allowed rotations in degrees; drawn uniformly.
    pub rotations: Vec<u16>,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { crop_size: 384, rotations: vec![0, 90, 180, 270], hflip: true, vflip: true }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: StageSchedule,
    pub augment: AugmentSpec,
    pub ssim_mode: SsimMode,
}

impl Default for SsimMode {
    fn default() -> Self {
        SsimMode::Rgb
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::config(format!("key '{key}': cannot parse value '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("key '{key}': expected a boolean, got '{v}'"))),
    }
}

impl Config {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "base_channels" => self.model.base_channels = parse_num(key, v)?,
            "blocks_per_level" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::config(format!(
                        "key '{key}': expected exactly 3 comma-separated counts, got '{v}'"
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.model.blocks_per_level[i] = parse_num(key, p)?;
                }
            }
            "refiner_levels" => self.model.refiner_levels = parse_num(key, v)?,
            "refiner_channels" => self.model.refiner_channels = parse_num(key, v)?,
            "enable_unet_branch" => self.model.enable_unet_branch = parse_bool(key, v)?,
            "enable_dwtffc_branch" => self.model.enable_dwtffc_branch = parse_bool(key, v)?,
            "enable_refiner" => self.model.enable_refiner = parse_bool(key, v)?,
            "ffa_heads" => self.model.ffa_heads = parse_num(key, v)?,
            "ffa_variant" => {
                self.model.ffa_variant = match v {
                    "matrix" => FfaVariant::Matrix,
                    "elementwise" => FfaVariant::Elementwise,
                    _ => {
                        return Err(Error::config(format!(
                            "key '{key}': expected 'matrix' or 'elementwise', got '{v}'"
                        )))
                    }
                }
            }
            "alpha" => self.loss.alpha = parse_num(key, v)?,
            "beta" => self.loss.beta = parse_num(key, v)?,
            "gamma" => self.loss.gamma = parse_num(key, v)?,
            "stage1_steps" => self.schedule.stage1_steps = parse_num(key, v)?,
            "stage2_steps" => self.schedule.stage2_steps = parse_num(key, v)?,
            "lr1_start" => self.schedule.lr1_start = parse_num(key, v)?,
            "lr1_end" => self.schedule.lr1_end = parse_num(key, v)?,
            "lr2" => self.schedule.lr2 = parse_num(key, v)?,
            "batch_size" => self.schedule.batch_size = parse_num(key, v)?,
            "adam_beta1" => self.schedule.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.schedule.adam_beta2 = parse_num(key, v)?,
            "stage2_joint" => self.schedule.stage2_joint = parse_bool(key, v)?,
            "clip_norm" => self.schedule.clip_norm = parse_num(key, v)?,
            "crop_size" => self.augment.crop_size = parse_num(key, v)?,
            "rotations" => {
                let mut rots = Vec::new();
                for p in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    rots.push(parse_num::<u16>(key, p)?);
                }
                self.augment.rotations = rots;
            }
            "hflip" => self.augment.hflip = parse_bool(key, v)?,
            "vflip" => self.augment.vflip = parse_bool(key, v)?,
            "ssim_mode" => {
                self.ssim_mode = match v {
                    "rgb" => SsimMode::Rgb,
                    "luma" => SsimMode::Luma,
                    _ => {
                        return Err(Error::config(format!(
                            "key '{key}': expected 'rgb' or 'luma', got '{v}'"
                        )))
                    }
                }
            }
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse config text (one `key = value` per line, `#` comments).
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Check every invariant; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !m.enable_unet_branch && !m.enable_dwtffc_branch {
            return Err(Error::config(
                "enable_unet_branch / enable_dwtffc_branch: at least one branch must be enabled",
            ));
        }
        for (key, v) in [
            ("base_channels", m.base_channels),
            ("refiner_levels", m.refiner_levels),
            ("refiner_channels", m.refiner_channels),
            ("ffa_heads", m.ffa_heads),
        ] {
            if v == 0 {
                return Err(Error::config(format!("key '{key}': must be >= 1")));
            }
        }
        if m.blocks_per_level.iter().any(|&b| b == 0) {
            return Err(Error::config("key 'blocks_per_level': every count must be >= 1"));
        }
        if m.refiner_channels % m.ffa_heads != 0 {
            return Err(Error::config(format!(
                "key 'ffa_heads': refiner_channels ({}) must be divisible by ffa_heads ({})",
                m.refiner_channels, m.ffa_heads
            )));
        }
        let l = &self.loss;
        for (key, v) in [("alpha", l.alpha), ("beta", l.beta), ("gamma", l.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("key '{key}': must be a nonnegative real")));
            }
        }
        let s = &self.schedule;
        for (key, v) in [("stage1_steps", s.stage1_steps), ("stage2_steps", s.stage2_steps), ("batch_size", s.batch_size)] {
            if v == 0 {
                return Err(Error::config(format!("key '{key}': must be >= 1")));
            }
        }
        for (key, v) in [("lr1_start", s.lr1_start), ("lr1_end", s.lr1_end), ("lr2", s.lr2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("key '{key}': must be > 0")));
            }
        }
        if s.lr1_end >= s.lr1_start {
            return Err(Error::config("key 'lr1_end': must be smaller than lr1_start"));
        }
        for (key, v) in [("adam_beta1", s.adam_beta1), ("adam_beta2", s.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("key '{key}': must lie in (0, 1)")));
            }
        }
        let a = &self.augment;
        if a.crop_size == 0 {
            return Err(Error::config("key 'crop_size': must be >= 1"));
        }
        if a.rotations.is_empty() {
            return Err(Error::config("key 'rotations': at least one rotation required"));
        }
        if a.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::config(
                "key 'rotations': entries must come from {0, 90, 180, 270}",
            ));
        }
        Ok(())
    }

    /// Every key in sorted order; the canonical text form.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let m = &self.model;
        kv.insert("base_channels".into(), m.base_channels.to_string());
        kv.insert(
            "blocks_per_level".into(),
            format!("{},{},{}", m.blocks_per_level[0], m.blocks_per_level[1], m.blocks_per_level[2]),
        );
        kv.insert("refiner_levels".into(), m.refiner_levels.to_string());
        kv.insert("refiner_channels".into(), m.refiner_channels.to_string());
        kv.insert("enable_unet_branch".into(), m.enable_unet_branch.to_string());
        kv.insert("enable_dwtffc_branch".into(), m.enable_dwtffc_branch.to_string());
        kv.insert("enable_refiner".into(), m.enable_refiner.to_string());
        kv.insert("ffa_heads".into(), m.ffa_heads.to_string());
        kv.insert("ffa_variant".into(), m.ffa_variant.as_str().into());
        kv.insert("alpha".into(), self.loss.alpha.to_string());
        kv.insert("beta".into(), self.loss.beta.to_string());
        kv.insert("gamma".into(), self.loss.gamma.to_string());
        let s = &self.schedule;
        kv.insert("stage1_steps".into(), s.stage1_steps.to_string());
        kv.insert("stage2_steps".into(), s.stage2_steps.to_string());
        kv.insert("lr1_start".into(), s.lr1_start.to_string());
        kv.insert("lr1_end".into(), s.lr1_end.to_string());
        kv.insert("lr2".into(), s.lr2.to_string());
        kv.insert("batch_size".into(), s.batch_size.to_string());
        kv.insert("adam_beta1".into(), s.adam_beta1.to_string());
        kv.insert("adam_beta2".into(), s.adam_beta2.to_string());
        kv.insert("stage2_joint".into(), s.stage2_joint.to_string());
        kv.insert("clip_norm".into(), s.clip_norm.to_string());
        let a = &self.augment;
        kv.insert("crop_size".into(), a.crop_size.to_string());
        kv.insert(
            "rotations".into(),
            a.rotations.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert("hflip".into(), a.hflip.to_string());
        kv.insert("vflip".into(), a.vflip.to_string());
        kv.insert("ssim_mode".into(), self.ssim_mode.as_str().into());
        kv
    }

    pub fn to_canonical_string(&self) -> String {
        self.to_key_values()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Table-4 style ablation presets.
    pub fn ablation(&self, name: &str) -> Result<Config> {
        let mut c = self.clone();
        match name {
            "full" => {
                c.model.enable_unet_branch = true;
                c.model.enable_dwtffc_branch = true;
                c.model.enable_refiner = true;
            }
            "wo_refinement" => {
                c.model.enable_unet_branch = true;
                c.model.enable_dwtffc_branch = true;
                c.model.enable_refiner = false;
            }
            "only_unet" => {
                c.model.enable_unet_branch = true;
                c.model.enable_dwtffc_branch = false;
                c.model.enable_refiner = false;
            }
            "only_dwtffc" => {
                c.model.enable_unet_branch = false;
                c.model.enable_dwtffc_branch = true;
                c.model.enable_refiner = false;
            }
            _ => return Err(Error::config(format!("unknown ablation '{name}'"))),
        }
        Ok(c)
    }
}

/// The four runnable ablation rows, in report order.
pub const ABLATION_NAMES: [&str; 4] = ["full", "wo_refinement", "only_unet", "only_dwtffc"];

//! Flat `key = value` configuration with dotted keys.
//!
//! Lines are `key = value`; `#` starts a comment. A `preset` key (desk or
//! paper) selects the base values and is applied before any other key,
//! wherever it appears. Unknown keys are rejected.
//!
//! | key | meaning |
//! |---|---|
//! | `deblur.base_channels` | width at full resolution |
//! | `deblur.blocks`, `deblur.heads` | four comma-separated counts, one per scale |
//! | `deblur.kernel_size` | adaptive filter size (odd) |
//! | `deblur.ffn_expansion`, `deblur.stack_ratio` | hidden width ratios |
//! | `prior.channels`, `prior.memory_size` | prior width and memory rows |
//! | `reblur.channels`, `disc.channels` | widths of the training-only networks |
//! | `diffusion.steps`, `diffusion.beta_start`, `diffusion.beta_end`, `diffusion.blocks` | noise schedule and denoiser depth |
//! | `loss.gan`, `loss.cyc`, `loss.wave`, `loss.diff` | objective weights |
//! | `optim.lr`, `optim.beta1`, `optim.beta2`, `optim.eps` | Adam |
//! | `train.patch`, `train.batch`, `train.flips` | patch sampling |
//! | `train.stage1_steps`, `train.stage2_steps`, `train.checkpoint_every` | step budgets |
//! | `data.count`, `data.size`, `data.kernel`, `data.kernel_size`, `data.strength`, `data.tiles` | synthetic corpus |
//! | `data.ratio`, `data.holdout` | unpaired split ratio (blurry share) and held-out pairs |
//! | `ablation.diffusion`, `ablation.tpe`, `ablation.ttformer`, `ablation.multi_scale`, `ablation.joint_train`, `ablation.wave_loss` | component switches, all `true` by default |

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cycle::LossWeights;
use crate::data::{BlurSpec, KernelKind};
use crate::deblur::{DeblurConfig, PriorInjection, SCALES};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub blocks: usize,
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub flips: bool,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub kernel: KernelKind,
    pub kernel_size: usize,
    pub strength: f64,
    pub tiles: usize,
    /// Blurry share of the unpaired split.
    pub ratio: f64,
    /// Pairs kept out of the split for validation.
    pub holdout: usize,
}

impl DataConfig {
    pub fn blur_spec(&self) -> BlurSpec {
        BlurSpec {
            kind: self.kernel,
            kernel_size: self.kernel_size,
            sigma_or_length: self.strength,
            tiles: self.tiles,
            angle_deg: None,
        }
    }
}

/// Component switches; `false` removes the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub diffusion: bool,
    pub tpe: bool,
    pub ttformer: bool,
    pub multi_scale: bool,
    pub joint_train: bool,
    pub wave_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            diffusion: true,
            tpe: true,
            ttformer: true,
            multi_scale: true,
            joint_train: true,
            wave_loss: true,
        }
    }
}

impl Ablation {
    /// Every single-component removal, by name.
    pub const NAMES: [&'static str; 6] = ["diffusion", "tpe", "ttformer", "multi_scale", "joint_train", "wave_loss"];

    pub fn without(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "diffusion" => a.diffusion = false,
            "tpe" => a.tpe = false,
            "ttformer" => a.ttformer = false,
            "multi_scale" => a.multi_scale = false,
            "joint_train" => a.joint_train = false,
            "wave_loss" => a.wave_loss = false,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(a)
    }

    pub fn injection(&self) -> PriorInjection {
        if !self.ttformer {
            PriorInjection::Off
        } else if !self.multi_scale {
            PriorInjection::FirstScale
        } else {
            PriorInjection::AllScales
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub preset: Preset,
    pub deblur: DeblurConfig,
    pub memory_size: usize,
    pub reblur_channels: usize,
    pub disc_channels: usize,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: Ablation,
}

impl Config {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            deblur: DeblurConfig::desk(),
            memory_size: 256,
            reblur_channels: 16,
            disc_channels: 16,
            diffusion: DiffusionConfig {
                steps: 8,
                beta_start: 0.1,
                beta_end: 0.9,
                blocks: 5,
            },
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            train: TrainConfig {
                patch: 64,
                batch: 1,
                flips: true,
                stage1_steps: 200,
                stage2_steps: 500,
                checkpoint_every: 100,
            },
            data: DataConfig {
                count: 96,
                size: 96,
                kernel: KernelKind::Mixed,
                kernel_size: 9,
                strength: 4.0,
                tiles: 2,
                ratio: 0.6,
                holdout: 16,
            },
            ablation: Ablation::default(),
        }
    }

    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.deblur = DeblurConfig::paper();
        c.reblur_channels = 32;
        c.disc_channels = 64;
        c.train = TrainConfig {
            patch: 256,
            batch: 8,
            flips: true,
            stage1_steps: 200 * 1262 / 8,
            stage2_steps: 200 * 1262 / 8,
            checkpoint_every: 5000,
        };
        c.data.size = 320;
        c
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses config text on top of the desk preset (or the preset it names).
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| parse_preset(v))
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::from_preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; call [`Config::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "preset" => *self = Self::from_preset(parse_preset(v)?),
            "deblur.base_channels" => self.deblur.base_channels = num(key, v)?,
            "deblur.blocks" => self.deblur.blocks = four(key, v)?,
            "deblur.heads" => self.deblur.heads = four(key, v)?,
            "deblur.kernel_size" => self.deblur.kernel_size = num(key, v)?,
            "deblur.ffn_expansion" => self.deblur.ffn_expansion = num(key, v)?,
            "deblur.stack_ratio" => self.deblur.stack_ratio = num(key, v)?,
            "prior.channels" => self.deblur.prior_channels = num(key, v)?,
            "prior.memory_size" => self.memory_size = num(key, v)?,
            "reblur.channels" => self.reblur_channels = num(key, v)?,
            "disc.channels" => self.disc_channels = num(key, v)?,
            "diffusion.steps" => self.diffusion.steps = num(key, v)?,
            "diffusion.beta_start" => self.diffusion.beta_start = num(key, v)?,
            "diffusion.beta_end" => self.diffusion.beta_end = num(key, v)?,
            "diffusion.blocks" => self.diffusion.blocks = num(key, v)?,
            "loss.gan" => self.loss.gan = num(key, v)?,
            "loss.cyc" => self.loss.cyc = num(key, v)?,
            "loss.wave" => self.loss.wave = num(key, v)?,
            "loss.diff" => self.loss.diff = num(key, v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "train.patch" => self.train.patch = num(key, v)?,
            "train.batch" => self.train.batch = num(key, v)?,
            "train.flips" => self.train.flips = num(key, v)?,
            "train.stage1_steps" => self.train.stage1_steps = num(key, v)?,
            "train.stage2_steps" => self.train.stage2_steps = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "data.count" => self.data.count = num(key, v)?,
            "data.size" => self.data.size = num(key, v)?,
            "data.kernel" => self.data.kernel = num(key, v)?,
            "data.kernel_size" => self.data.kernel_size = num(key, v)?,
            "data.strength" => self.data.strength = num(key, v)?,
            "data.tiles" => self.data.tiles = num(key, v)?,
            "data.ratio" => self.data.ratio = num(key, v)?,
            "data.holdout" => self.data.holdout = num(key, v)?,
            "ablation.diffusion" => self.ablation.diffusion = num(key, v)?,
            "ablation.tpe" => self.ablation.tpe = num(key, v)?,
            "ablation.ttformer" => self.ablation.ttformer = num(key, v)?,
            "ablation.multi_scale" => self.ablation.multi_scale = num(key, v)?,
            "ablation.joint_train" => self.ablation.joint_train = num(key, v)?,
            "ablation.wave_loss" => self.ablation.wave_loss = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.deblur.validate()?;
        self.loss.validate()?;
        self.diffusion.schedule()?;
        let positive = [
            ("prior.memory_size", self.memory_size),
            ("reblur.channels", self.reblur_channels),
            ("disc.channels", self.disc_channels),
            ("diffusion.blocks", self.diffusion.blocks),
            ("train.batch", self.train.batch),
            ("train.checkpoint_every", self.train.checkpoint_every),
            ("data.count", self.data.count),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.train.patch == 0 || self.train.patch % 8 != 0 {
            return Err(Error::Config(format!("train.patch must be a positive multiple of 8, got {}", self.train.patch)));
        }
        if self.train.patch > self.data.size {
            return Err(Error::Config(format!(
                "train.patch {} exceeds data.size {}",
                self.train.patch, self.data.size
            )));
        }
        if !(self.data.ratio > 0.0 && self.data.ratio < 1.0) {
            return Err(Error::Config(format!("data.ratio must lie in (0, 1), got {}", self.data.ratio)));
        }
        if self.data.holdout + 2 > self.data.count {
            return Err(Error::Config("data.holdout leaves fewer than two training pairs".into()));
        }
        if !(self.optim.lr > 0.0 && (0.0..1.0).contains(&self.optim.beta1) && (0.0..1.0).contains(&self.optim.beta2)) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.data.blur_spec().validate()
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let list = |a: &[usize; SCALES]| a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let kernel = match self.data.kernel {
            KernelKind::Gaussian => "gaussian",
            KernelKind::LinearMotion => "linear_motion",
            KernelKind::Mixed => "mixed",
        };
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        };
        let d = &self.deblur;
        let a = &self.ablation;
        let lines = [
            format!("preset = {preset}"),
            format!("deblur.base_channels = {}", d.base_channels),
            format!("deblur.blocks = {}", list(&d.blocks)),
            format!("deblur.heads = {}", list(&d.heads)),
            format!("deblur.kernel_size = {}", d.kernel_size),
            format!("deblur.ffn_expansion = {:?}", d.ffn_expansion),
            format!("deblur.stack_ratio = {:?}", d.stack_ratio),
            format!("prior.channels = {}", d.prior_channels),
            format!("prior.memory_size = {}", self.memory_size),
            format!("reblur.channels = {}", self.reblur_channels),
            format!("disc.channels = {}", self.disc_channels),
            format!("diffusion.steps = {}", self.diffusion.steps),
            format!("diffusion.beta_start = {:?}", self.diffusion.beta_start),
            format!("diffusion.beta_end = {:?}", self.diffusion.beta_end),
            format!("diffusion.blocks = {}", self.diffusion.blocks),
            format!("loss.gan = {:?}", self.loss.gan),
            format!("loss.cyc = {:?}", self.loss.cyc),
            format!("loss.wave = {:?}", self.loss.wave),
            format!("loss.diff = {:?}", self.loss.diff),
            format!("optim.lr = {:?}", self.optim.lr),
            format!("optim.beta1 = {:?}", self.optim.beta1),
            format!("optim.beta2 = {:?}", self.optim.beta2),
            format!("optim.eps = {:?}", self.optim.eps),
            format!("train.patch = {}", self.train.patch),
            format!("train.batch = {}", self.train.batch),
            format!("train.flips = {}", self.train.flips),
            format!("train.stage1_steps = {}", self.train.stage1_steps),
            format!("train.stage2_steps = {}", self.train.stage2_steps),
            format!("train.checkpoint_every = {}", self.train.checkpoint_every),
            format!("data.count = {}", self.data.count),
            format!("data.size = {}", self.data.size),
            format!("data.kernel = {kernel}"),
            format!("data.kernel_size = {}", self.data.kernel_size),
            format!("data.strength = {:?}", self.data.strength),
            format!("data.tiles = {}", self.data.tiles),
            format!("data.ratio = {:?}", self.data.ratio),
            format!("data.holdout = {}", self.data.holdout),
            format!("ablation.diffusion = {}", a.diffusion),
            format!("ablation.tpe = {}", a.tpe),
            format!("ablation.ttformer = {}", a.ttformer),
            format!("ablation.multi_scale = {}", a.multi_scale),
            format!("ablation.joint_train = {}", a.joint_train),
            format!("ablation.wave_loss = {}", a.wave_loss),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn parse_preset(v: &str) -> Result<Preset> {
    match v {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn four(key: &str, v: &str) -> Result<[usize; SCALES]> {
    let parts = v
        .split(',')
        .map(|p| num::<usize>(key, p.trim()))
        .collect::<Result<Vec<_>>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {SCALES} comma-separated values")))
}

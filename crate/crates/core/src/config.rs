//! Presets and the `key = value` run-configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::render::RenderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Argument(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    Shared,
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsStart {
    /// First centroid drawn from the per-sample stream.
    PerSample,
    /// First centroid is always point 0.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub expert_dim: usize,
    pub image_ffn_dim: usize,
    pub points: usize,
    pub patches: usize,
    pub group_size: usize,
    pub pos_hidden: usize,
    pub proj_dim: usize,
    pub angle_bins: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Pixels enter the patch projection as `(v - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub classes: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub sharing: SharingMode,
    pub fps_start: FpsStart,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            layers: 12,
            dim: 768,
            heads: 12,
            expert_dim: 192,
            image_ffn_dim: 3072,
            points: 2048,
            patches: 160,
            group_size: 32,
            pos_hidden: 128,
            proj_dim: 256,
            angle_bins: 36,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            pixel_mean: 0.9,
            pixel_std: 0.25,
            classes: 6,
            ln_eps: 1e-5,
            init_std: 0.02,
            sharing: SharingMode::Shared,
            fps_start: FpsStart::PerSample,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            expert_dim: 16,
            image_ffn_dim: 256,
            points: 256,
            patches: 16,
            group_size: 16,
            pos_hidden: 32,
            proj_dim: 64,
            image_size: 32,
            patch_size: 8,
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the first point MLP stage.
    pub fn f1_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn image_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads");
        }
        if !self.dim.is_multiple_of(2) {
            return bad("dim must be even");
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.patches == 0 || self.patches > self.points || self.group_size == 0 || self.group_size > self.points {
            return bad("need 1 <= patches <= points and 1 <= group_size <= points");
        }
        if self.channels != 3 {
            return bad("only 3-channel images are supported");
        }
        if [self.expert_dim, self.image_ffn_dim, self.pos_hidden, self.proj_dim, self.angle_bins, self.classes]
            .contains(&0)
        {
            return bad("widths, angle_bins and classes must be positive");
        }
        if !(self.pixel_std > 0.0) || !self.pixel_mean.is_finite() {
            return bad("pixel_std must be positive and pixel_mean finite");
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("ln_eps and init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cm: bool,
    pub im: bool,
    pub reg: bool,
    pub w_cm: f64,
    pub w_im: f64,
    pub w_reg: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { cm: true, im: true, reg: true, w_cm: 1.0, w_im: 1.0, w_reg: 1.0, tau: 0.07 }
    }
}

impl LossConfig {
    pub fn none_enabled(&self) -> bool {
        !(self.cm || self.im || self.reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub trace: bool,
    /// Checkpoint every this many epochs (0 disables periodic checkpoints).
    pub ckpt_every: usize,
    pub losses: LossConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            batch: 1024,
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            trace: true,
            ckpt_every: 0,
            losses: LossConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self { epochs: 60, batch: 32, lr: 1e-3, warmup_steps: 50, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.losses.tau > 0.0) {
            return Err(Error::Config("lr and tau must be positive, weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    Trained,
    RandomFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub mode: WarmupMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Random yaw renders per training cloud per epoch.
    pub views: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { mode: WarmupMode::Trained, epochs: 10, batch: 32, lr: 1e-3, weight_decay: 0.01, warmup_steps: 20, views: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 50, batch: 32, lr: 1e-3, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { way: 2, shot: 5, query: 10, episodes: 10 }
    }
}

/// Everything a pipeline run needs, as resolved from a preset plus file overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub render: RenderConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub fewshot: FewShotConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, render, train) = match p {
            Preset::Paper => (ModelConfig::paper(), RenderConfig::paper(), TrainConfig::paper()),
            Preset::Desk => (ModelConfig::desk(), RenderConfig::desk(), TrainConfig::desk()),
        };
        let data = DataConfig { points: model.points, ..DataConfig::default() };
        Self {
            preset: p,
            model,
            data,
            render,
            warmup: WarmupConfig::default(),
            train,
            finetune: FinetuneConfig::default(),
            fewshot: FewShotConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.render.validate()?;
        if self.render.width != self.model.image_size || self.render.height != self.model.image_size {
            return Err(Error::Config("render size must equal model image_size".into()));
        }
        if self.data.points != self.model.points {
            return Err(Error::Config("data points must equal model points".into()));
        }
        Ok(())
    }

    /// Parses a config file. `preset` (top level) selects the defaults; every
    /// other key must name an existing field of its section.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let preset = match file.get("preset") {
            None => Preset::Desk,
            Some(toml::Value::String(s)) => s.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let mut merged = toml::Table::try_from(RunConfig::preset(preset))
            .map_err(|e| Error::Config(format!("internal: {e}")))?;
        merge(&mut merged, &file, "")?;
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical resolved form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = base.get_mut(key) else {
            return Err(Error::Config(format!("unknown key `{path}`")));
        };
        match (slot, value) {
            (toml::Value::Table(b), toml::Value::Table(o)) => merge(b, o, &path)?,
            (toml::Value::Table(_), _) => return Err(Error::Config(format!("`{path}` must be a section"))),
            (_, toml::Value::Table(_)) => return Err(Error::Config(format!("`{path}` is not a section"))),
            (slot, v) => {
                let v = match (&*slot, v) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                    _ => v.clone(),
                };
                *slot = v;
            }
        }
    }
    Ok(())
}

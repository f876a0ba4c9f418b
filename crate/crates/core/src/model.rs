//! Parameter layout and forward entry points of the full model.

use numcore::{Rng, Scalar, Tensor, Var};

use crate::backbone::{self, cls_tokens, encode};
use crate::config::{ModelConfig, SharingMode};
use crate::embed::{self, image_sequence, point_sequence};
use crate::error::{Error, Result};
use crate::geom::PatchGroups;
use crate::nn::{Ctx, GradPolicy};
use crate::params::{Init, Owner, ParamCount, ParamStore};
use crate::render::ImageRaster;

const STREAM_IMAGE: u64 = 1;
const STREAM_POINT: u64 = 2;
const STREAM_HEADS: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// An uninitialized model; call [`Model::init`] before use.
    pub fn new(cfg: ModelConfig) -> Self {
        Self { cfg, params: ParamStore::new() }
    }

    pub fn is_initialized(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn set_sharing_mode(&mut self, mode: SharingMode) -> Result<()> {
        if self.is_initialized() {
            return Err(Error::Usage("sharing mode must be chosen before parameter init".into()));
        }
        self.cfg.sharing = mode;
        Ok(())
    }

    /// Draws every parameter. The image tower, point path and heads use
    /// separate sub-streams, so the image tower for a seed is the same in
    /// both sharing modes. SSRL trainability is applied.
    pub fn init(&mut self, seed: u64) -> Result<()> {
        if self.is_initialized() {
            return Err(Error::Usage("model is already initialized".into()));
        }
        self.cfg.validate()?;
        let cfg = self.cfg.clone();
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        {
            let mut rng = root.split(STREAM_IMAGE);
            let mut init = Init { store: &mut store, rng: &mut rng, std: cfg.init_std };
            embed::init_image_embed(&mut init, &cfg)?;
            backbone::init_image_blocks(&mut init, &cfg)?;
            init.linear("image.head", cfg.dim, cfg.classes, true, Owner::Image)?;
        }
        {
            let mut rng = root.split(STREAM_POINT);
            let mut init = Init { store: &mut store, rng: &mut rng, std: cfg.init_std };
            embed::init_point_embed(&mut init, &cfg)?;
            backbone::init_point_blocks(&mut init, &cfg)?;
        }
        {
            let mut rng = root.split(STREAM_HEADS);
            let mut init = Init { store: &mut store, rng: &mut rng, std: cfg.init_std };
            init.mlp("heads.fp", &[cfg.dim, cfg.dim, cfg.proj_dim], Owner::Heads)?;
            init.mlp("heads.fi", &[cfg.dim, cfg.dim, cfg.proj_dim], Owner::Heads)?;
            init.linear("heads.ft", cfg.proj_dim, cfg.angle_bins, false, Owner::Heads)?;
        }
        self.params = store;
        self.set_ssrl_trainable();
        Ok(())
    }

    pub fn initialized(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(cfg);
        m.init(seed)?;
        Ok(m)
    }

    /// Point-owned parameters and projection heads trainable, the rest frozen.
    pub fn set_ssrl_trainable(&mut self) {
        self.params.set_trainable_where(|o| matches!(o, Owner::Point | Owner::Heads));
    }

    pub fn count(&self) -> ParamCount {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    pub fn ctx(&self, policy: GradPolicy) -> Ctx<'_, T> {
        Ctx::new(&self.params, policy)
    }
}

/// Final-block [CLS] outputs of the point path, `[B, D]`.
pub fn point_cls<T: Scalar>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, groups: &[PatchGroups]) -> Result<Var> {
    let seq = point_sequence(ctx, groups)?;
    let out = encode(ctx, &seq, cfg)?;
    cls_tokens(ctx, &out)
}

/// Final-block [CLS] outputs of the image path, `[B, D]`.
pub fn image_cls<T: Scalar>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, images: &[&ImageRaster]) -> Result<Var> {
    let seq = image_sequence(ctx, images, cfg)?;
    let out = encode(ctx, &seq, cfg)?;
    cls_tokens(ctx, &out)
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    let d = t.last_dim();
    t.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64() as f32).collect()).collect()
}

/// Inference-only point features, one row per input.
pub fn point_features<T: Scalar>(model: &Model<T>, groups: &[PatchGroups]) -> Result<Vec<Vec<f32>>> {
    let mut ctx = model.ctx(GradPolicy::None);
    let v = point_cls(&mut ctx, &model.cfg, groups)?;
    Ok(rows(ctx.g.value(v)))
}

pub fn image_features<T: Scalar>(model: &Model<T>, images: &[&ImageRaster]) -> Result<Vec<Vec<f32>>> {
    let mut ctx = model.ctx(GradPolicy::None);
    let v = image_cls(&mut ctx, &model.cfg, images)?;
    Ok(rows(ctx.g.value(v)))
}

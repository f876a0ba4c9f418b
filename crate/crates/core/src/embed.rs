//! Point and image input representations: patch embeddings, [CLS] slot,
//! position and modality type embeddings.

use numcore::{Rng, Scalar, Tensor, Var};

use crate::config::{FpsStart, ModelConfig};
use crate::error::{Error, Result};
use crate::geom::{farthest_point_sample, farthest_point_sample_from, knn_group, PatchGroups, PointCloud};
use crate::nn::Ctx;
use crate::params::{Init, Owner};
use crate::render::ImageRaster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Point,
    Image,
}

/// A batch of token sequences stored as `[batch * len, D]`, token 0 of each
/// sequence being the [CLS] slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenSequence {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
    pub modality: Modality,
}

pub(crate) fn init_point_embed<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let (d, h1) = (cfg.dim, cfg.f1_dim());
    init.mlp_fan_in("point.f1", &[6, h1, h1], Owner::Point)?;
    init.mlp_fan_in("point.f2", &[3 + h1, d, d], Owner::Point)?;
    init.mlp_fan_in("point.pos", &[3, cfg.pos_hidden, d], Owner::Point)?;
    init.normal("point.cls", &[1, d], Owner::Point)?;
    init.normal("point.type", &[1, d], Owner::Point)
}

pub(crate) fn init_image_embed<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.dim;
    init.linear("image.proj", cfg.patch_len(), d, false, Owner::Image)?;
    init.normal("image.cls", &[1, d], Owner::Image)?;
    init.normal("image.type", &[1, d], Owner::Image)?;
    init.normal("image.pos", &[cfg.image_patches() + 1, d], Owner::Image)
}

/// FPS centroids and kNN groups for one cloud under the model's settings.
pub fn tokenize_cloud(cloud: &PointCloud, cfg: &ModelConfig, rng: &mut Rng) -> Result<PatchGroups> {
    if cloud.len() < cfg.group_size || cloud.len() < cfg.patches {
        return Err(Error::Argument(format!(
            "cloud has {} points, need at least max(patches {}, group_size {})",
            cloud.len(),
            cfg.patches,
            cfg.group_size
        )));
    }
    let idx = match cfg.fps_start {
        FpsStart::PerSample => farthest_point_sample(cloud, cfg.patches, rng)?,
        FpsStart::Fixed => farthest_point_sample_from(cloud, cfg.patches, 0)?,
    };
    knn_group(cloud, &idx, cfg.group_size)
}

fn check_groups(groups: &[PatchGroups]) -> Result<(usize, usize)> {
    let first = groups.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (np, gl) = (first.num_groups(), first.group_len());
    for g in groups {
        if g.num_groups() != np || g.groups.iter().any(|gr| gr.len() != gl) {
            return Err(Error::Argument("patch groups differ in shape across the batch".into()));
        }
    }
    Ok((np, gl))
}

/// Two-stage shared-MLP max-pool embedding of every group, `[B * N_P, D]`.
pub fn point_patch_embed<T: Scalar>(ctx: &mut Ctx<'_, T>, groups: &[PatchGroups]) -> Result<Var> {
    let (_, gl) = check_groups(groups)?;
    let mut local = Vec::new();
    let mut coords = Vec::new();
    let mut rows = 0;
    for pg in groups {
        for g in &pg.groups {
            let c = g[0];
            for p in g {
                for a in 0..3 {
                    local.push(T::cast(p[a] as f64));
                }
                for a in 0..3 {
                    local.push(T::cast(p[a] as f64 - c[a] as f64));
                }
                coords.extend(p.iter().map(|&v| T::cast(v as f64)));
                rows += 1;
            }
        }
    }
    let x1 = ctx.g.constant(Tensor::new(local, vec![rows, 6])?)?;
    let h1 = ctx.mlp(x1, "point.f1", 2)?;
    let z_tilde = ctx.g.group_max(h1, gl)?;
    let spread: Vec<usize> = (0..rows).map(|r| r / gl).collect();
    let z_rep = ctx.g.gather_rows(z_tilde, spread)?;
    let xyz = ctx.g.constant(Tensor::new(coords, vec![rows, 3])?)?;
    let x2 = ctx.g.concat_cols(xyz, z_rep)?;
    let h2 = ctx.mlp(x2, "point.f2", 2)?;
    Ok(ctx.g.group_max(h2, gl)?)
}

/// Inserts a shared [CLS] row before each of the `batch` blocks of `n` rows.
fn prepend_cls<T: Scalar>(ctx: &mut Ctx<'_, T>, z: Var, cls: Var, batch: usize, n: usize) -> Result<Var> {
    let all = ctx.g.concat_rows(&[z, cls])?;
    let cls_row = batch * n;
    let mut idx = Vec::with_capacity(batch * (n + 1));
    for b in 0..batch {
        idx.push(cls_row);
        idx.extend(b * n..(b + 1) * n);
    }
    Ok(ctx.g.gather_rows(all, idx)?)
}

pub fn point_sequence<T: Scalar>(ctx: &mut Ctx<'_, T>, groups: &[PatchGroups]) -> Result<TokenSequence> {
    let (np, _) = check_groups(groups)?;
    let b = groups.len();
    let z = point_patch_embed(ctx, groups)?;
    let cls = ctx.p("point.cls")?;
    let tokens = prepend_cls(ctx, z, cls, b, np)?;
    let mut centers = Vec::with_capacity(b * (np + 1) * 3);
    for pg in groups {
        centers.extend([T::zero(); 3]);
        for c in &pg.centroids {
            centers.extend(c.iter().map(|&v| T::cast(v as f64)));
        }
    }
    let centers = ctx.g.constant(Tensor::new(centers, vec![b * (np + 1), 3])?)?;
    let pos = ctx.mlp(centers, "point.pos", 2)?;
    let x = ctx.g.add(tokens, pos)?;
    let ty = ctx.p("point.type")?;
    let var = ctx.g.add_tiled(x, ty)?;
    Ok(TokenSequence { var, batch: b, len: np + 1, modality: Modality::Point })
}

/// Non-overlapping `p x p` patches in row-major patch order, each flattened
/// row-major with channels interleaved per pixel.
pub fn image_patchify(img: &ImageRaster, p: usize) -> Result<Vec<Vec<f32>>> {
    if p == 0 || !img.width.is_multiple_of(p) || !img.height.is_multiple_of(p) {
        return Err(Error::Argument(format!("{}x{} image is not divisible into {p}x{p} patches", img.width, img.height)));
    }
    let c = ImageRaster::CHANNELS;
    let mut out = Vec::with_capacity((img.width / p) * (img.height / p));
    for py in 0..img.height / p {
        for px in 0..img.width / p {
            let mut patch = Vec::with_capacity(p * p * c);
            for y in py * p..(py + 1) * p {
                let o = (y * img.width + px * p) * c;
                patch.extend_from_slice(&img.data[o..o + p * c]);
            }
            out.push(patch);
        }
    }
    Ok(out)
}

/// Inverse of [`image_patchify`].
pub fn image_unpatchify(patches: &[Vec<f32>], width: usize, height: usize, p: usize) -> Result<ImageRaster> {
    let c = ImageRaster::CHANNELS;
    if p == 0 || !width.is_multiple_of(p) || !height.is_multiple_of(p) || patches.len() != (width / p) * (height / p) {
        return Err(Error::Argument("patch count does not match image size".into()));
    }
    let mut img = ImageRaster::filled(width, height, 0.0);
    let per_row = width / p;
    for (i, patch) in patches.iter().enumerate() {
        if patch.len() != p * p * c {
            return Err(Error::Argument("patch has wrong length".into()));
        }
        let (py, px) = (i / per_row, i % per_row);
        for (dy, y) in (py * p..(py + 1) * p).enumerate() {
            let o = (y * width + px * p) * c;
            img.data[o..o + p * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Ok(img)
}

pub fn image_sequence<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    images: &[&ImageRaster],
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    if images.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let ni = cfg.image_patches();
    let mut flat = Vec::with_capacity(images.len() * ni * cfg.patch_len());
    for img in images {
        if img.width != cfg.image_size || img.height != cfg.image_size {
            return Err(Error::Argument(format!(
                "image is {}x{}, model expects {}",
                img.width, img.height, cfg.image_size
            )));
        }
        for patch in image_patchify(img, cfg.patch_size)? {
            flat.extend(patch.into_iter().map(|v| T::cast((v as f64 - cfg.pixel_mean) / cfg.pixel_std)));
        }
    }
    let b = images.len();
    let x = ctx.g.constant(Tensor::new(flat, vec![b * ni, cfg.patch_len()])?)?;
    let z = ctx.linear(x, "image.proj")?;
    let cls = ctx.p("image.cls")?;
    let tokens = prepend_cls(ctx, z, cls, b, ni)?;
    let pos = ctx.p("image.pos")?;
    let x = ctx.g.add_tiled(tokens, pos)?;
    let ty = ctx.p("image.type")?;
    let var = ctx.g.add_tiled(x, ty)?;
    Ok(TokenSequence { var, batch: b, len: ni + 1, modality: Modality::Image })
}

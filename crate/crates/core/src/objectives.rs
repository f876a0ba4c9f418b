//! Projection heads and the cross-modal, intra-modal and rotation losses.

use numcore::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::geom::PatchGroups;
use crate::model::{image_cls, point_cls};
use crate::nn::Ctx;
use crate::render::ImageRaster;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AngleTarget {
    pub bins: usize,
    pub bin: usize,
}

impl AngleTarget {
    pub fn new(theta_deg: f64, bins: usize) -> Self {
        let width = 360.0 / bins as f64;
        let bin = ((theta_deg / width).floor() as i64).rem_euclid(bins as i64) as usize;
        Self { bins, bin }
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.bins];
        y[self.bin] = 1.0;
        y
    }
}

/// Head output, unit-normalized per row. `degenerate` counts rows that were
/// exactly zero before normalization.
pub struct Projected {
    pub var: Var,
    pub degenerate: usize,
}

pub fn project<T: Scalar>(ctx: &mut Ctx<'_, T>, cls: Var, head: &str) -> Result<Projected> {
    let y = ctx.mlp(cls, head, 2)?;
    let t = ctx.g.value(y);
    let d = t.last_dim();
    let degenerate = t.data().chunks(d).filter(|r| r.iter().all(|v| *v == T::zero())).count();
    let var = ctx.g.l2_normalize(y)?;
    Ok(Projected { var, degenerate })
}

/// Symmetric InfoNCE over `sim = a b^T / tau` with positives on the diagonal.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let n = g.shape(a)[0];
    if g.shape(b)[0] != n {
        return Err(Error::Argument("contrastive inputs differ in row count".into()));
    }
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let sim = g.scale(sim, T::cast(1.0 / tau))?;
    let diag: Vec<usize> = (0..n).collect();
    let rows = g.log_softmax(sim, 1)?;
    let a2b = g.pick(rows, diag.clone())?;
    let cols = g.log_softmax(sim, 0)?;
    let b2a = g.pick(cols, diag)?;
    let both = g.add(a2b, b2a)?;
    let m = g.mean(both)?;
    Ok(g.scale(m, T::cast(-0.5))?)
}

/// `mean(1 - y^T normalize(f_T(h - h')))`.
pub fn regression_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, h: Var, h_prime: Var, targets: &[AngleTarget]) -> Result<Var> {
    if ctx.g.shape(h)[0] != targets.len() || ctx.g.shape(h_prime)[0] != targets.len() {
        return Err(Error::Argument("regression inputs and targets differ in count".into()));
    }
    let diff = ctx.g.sub(h, h_prime)?;
    let logits = ctx.linear(diff, "heads.ft")?;
    let y_hat = ctx.g.l2_normalize(logits)?;
    let hit = ctx.g.pick(y_hat, targets.iter().map(|t| t.bin).collect())?;
    let m = ctx.g.mean(hit)?;
    Ok(ctx.g.affine(m, -T::one(), T::one())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cm: Option<f64>,
    pub l_im: Option<f64>,
    pub l_reg: Option<f64>,
    pub total: f64,
    pub cm: bool,
    pub im: bool,
    pub reg: bool,
}

/// One SSRL batch after tokenization.
pub struct SsrlBatch<'a> {
    pub original: &'a [PatchGroups],
    pub rotated: &'a [PatchGroups],
    pub images: &'a [&'a ImageRaster],
    pub targets: &'a [AngleTarget],
}

pub struct LossOutput {
    pub total: Var,
    pub bundle: LossBundle,
    pub degenerate: usize,
}

fn halves<T: Scalar>(g: &mut Graph<T>, x: Var, n: usize) -> Result<(Var, Var)> {
    let a = g.gather_rows(x, (0..n).collect())?;
    let b = g.gather_rows(x, (n..2 * n).collect())?;
    Ok((a, b))
}

/// Weighted sum of the enabled terms. With `trace`, disabled terms are still
/// evaluated and reported but do not enter the total.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    batch: &SsrlBatch<'_>,
    losses: &LossConfig,
    trace: bool,
) -> Result<LossOutput> {
    let n = batch.original.len();
    if n == 0 || batch.rotated.len() != n || batch.images.len() != n || batch.targets.len() != n {
        return Err(Error::Argument("SSRL batch parts differ in length or are empty".into()));
    }
    let want_cm = losses.cm || trace;
    let want_rot = losses.im || losses.reg || trace;
    let mut degenerate = 0;

    let (h, h_rot) = if want_rot {
        let both: Vec<PatchGroups> = batch.original.iter().chain(batch.rotated).cloned().collect();
        let cls = point_cls(ctx, cfg, &both)?;
        let proj = project(ctx, cls, "heads.fp")?;
        degenerate += proj.degenerate;
        let (a, b) = halves(&mut ctx.g, proj.var, n)?;
        (a, Some(b))
    } else {
        let cls = point_cls(ctx, cfg, batch.original)?;
        let proj = project(ctx, cls, "heads.fp")?;
        degenerate += proj.degenerate;
        (proj.var, None)
    };

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut bundle = LossBundle {
        l_cm: None,
        l_im: None,
        l_reg: None,
        total: 0.0,
        cm: losses.cm,
        im: losses.im,
        reg: losses.reg,
    };
    if want_cm {
        let cls = image_cls(ctx, cfg, batch.images)?;
        let proj = project(ctx, cls, "heads.fi")?;
        degenerate += proj.degenerate;
        let l = contrastive_loss(&mut ctx.g, h, proj.var, losses.tau)?;
        bundle.l_cm = Some(ctx.g.item(l).as_f64());
        if losses.cm {
            terms.push((l, losses.w_cm));
        }
    }
    if let Some(h_rot) = h_rot {
        if losses.im || trace {
            let l = contrastive_loss(&mut ctx.g, h, h_rot, losses.tau)?;
            bundle.l_im = Some(ctx.g.item(l).as_f64());
            if losses.im {
                terms.push((l, losses.w_im));
            }
        }
        if losses.reg || trace {
            let l = regression_loss(ctx, h, h_rot, batch.targets)?;
            bundle.l_reg = Some(ctx.g.item(l).as_f64());
            if losses.reg {
                terms.push((l, losses.w_reg));
            }
        }
    }
    let mut total = ctx.g.constant(Tensor::scalar(T::zero()))?;
    for (l, w) in terms {
        let wl = ctx.g.scale(l, T::cast(w))?;
        total = ctx.g.add(total, wl)?;
    }
    bundle.total = ctx.g.item(total).as_f64();
    Ok(LossOutput { total, bundle, degenerate })
}

//! Multi-way Transformer blocks: MSA shared across modalities followed by a
//! per-modality LayerNorm + FFN expert.

use numcore::{Scalar, Var};

use crate::config::{ModelConfig, SharingMode};
use crate::embed::{Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{Init, Owner};

/// Parameter-name prefixes used by one block for one modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockNames {
    pub ln1: String,
    pub attn: String,
    pub ln: String,
    pub ffn: String,
}

pub fn block_names(cfg: &ModelConfig, layer: usize, modality: Modality) -> BlockNames {
    match (cfg.sharing, modality) {
        (SharingMode::Separate, Modality::Point) => BlockNames {
            ln1: format!("point_tower.{layer}.ln1"),
            attn: format!("point_tower.{layer}.attn"),
            ln: format!("point_tower.{layer}.ln"),
            ffn: format!("point_tower.{layer}.ffn"),
        },
        (_, m) => {
            let e = if m == Modality::Point { "point" } else { "image" };
            BlockNames {
                ln1: format!("blocks.{layer}.ln1"),
                attn: format!("blocks.{layer}.attn"),
                ln: format!("blocks.{layer}.{e}.ln"),
                ffn: format!("blocks.{layer}.{e}.ffn"),
            }
        }
    }
}

/// Names of every attention-path parameter a modality reads in `layer`.
pub fn msa_param_names(cfg: &ModelConfig, layer: usize, modality: Modality) -> Vec<String> {
    let n = block_names(cfg, layer, modality);
    let mut v = vec![format!("{}.g", n.ln1), format!("{}.b", n.ln1)];
    for p in ["q", "k", "v", "o"] {
        v.push(format!("{}.{p}.w", n.attn));
        v.push(format!("{}.{p}.b", n.attn));
    }
    v
}

fn init_attention<T: Scalar>(init: &mut Init<'_, T>, n: &BlockNames, d: usize, owner: Owner) -> Result<()> {
    init.layernorm(&n.ln1, d, owner)?;
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{}.{p}", n.attn), d, d, true, owner)?;
    }
    Ok(())
}

fn init_expert<T: Scalar>(init: &mut Init<'_, T>, n: &BlockNames, d: usize, hidden: usize, owner: Owner) -> Result<()> {
    init.layernorm(&n.ln, d, owner)?;
    init.mlp(&n.ffn, &[d, hidden, d], owner)
}

pub(crate) fn init_image_blocks<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    for l in 0..cfg.layers {
        let n = block_names(cfg, l, Modality::Image);
        init_attention(init, &n, cfg.dim, Owner::Shared)?;
        init_expert(init, &n, cfg.dim, cfg.image_ffn_dim, Owner::Image)?;
    }
    Ok(())
}

pub(crate) fn init_point_blocks<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    for l in 0..cfg.layers {
        let n = block_names(cfg, l, Modality::Point);
        if cfg.sharing == SharingMode::Separate {
            init_attention(init, &n, cfg.dim, Owner::Point)?;
        }
        init_expert(init, &n, cfg.dim, cfg.expert_dim, Owner::Point)?;
    }
    Ok(())
}

fn check_width<T: Scalar>(ctx: &Ctx<'_, T>, seq: &TokenSequence, cfg: &ModelConfig) -> Result<()> {
    let shape = ctx.g.shape(seq.var);
    if shape != [seq.batch * seq.len, cfg.dim] {
        return Err(Error::Argument(format!(
            "token tensor {shape:?} does not match batch {} x len {} x D {}",
            seq.batch, seq.len, cfg.dim
        )));
    }
    Ok(())
}

/// `MSA(LN(H)) + H` with scaled dot-product attention over each sequence.
pub fn msa_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<TokenSequence> {
    check_width(ctx, seq, cfg)?;
    let n = block_names(cfg, layer, seq.modality);
    let (b, s, h, dh) = (seq.batch, seq.len, cfg.heads, cfg.head_dim());
    let x = ctx.layernorm(seq.var, &n.ln1, cfg.ln_eps)?;
    let mut heads = [x; 3];
    for (slot, p) in heads.iter_mut().zip(["q", "k", "v"]) {
        let y = ctx.linear(x, &format!("{}.{p}", n.attn))?;
        let y = ctx.g.reshape(y, &[b, s, h, dh])?;
        let y = ctx.g.permute(y, &[0, 2, 1, 3])?;
        *slot = ctx.g.reshape(y, &[b * h, s, dh])?;
    }
    let [q, k, v] = heads;
    let scores = ctx.g.batch_matmul(q, k, true)?;
    let scores = ctx.g.scale(scores, T::cast(1.0 / (dh as f64).sqrt()))?;
    let att = ctx.g.softmax(scores, 2)?;
    let y = ctx.g.batch_matmul(att, v, false)?;
    let y = ctx.g.reshape(y, &[b, h, s, dh])?;
    let y = ctx.g.permute(y, &[0, 2, 1, 3])?;
    let y = ctx.g.reshape(y, &[b * s, cfg.dim])?;
    let y = ctx.linear(y, &format!("{}.o", n.attn))?;
    let var = ctx.g.add(y, seq.var)?;
    Ok(TokenSequence { var, ..*seq })
}

/// Modality-routed `FFN(LN(H~)) + H~`.
pub fn expert_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<TokenSequence> {
    let n = block_names(cfg, layer, seq.modality);
    let x = ctx.layernorm(seq.var, &n.ln, cfg.ln_eps)?;
    let y = ctx.mlp(x, &n.ffn, 2)?;
    let var = ctx.g.add(y, seq.var)?;
    Ok(TokenSequence { var, ..*seq })
}

pub fn block_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<TokenSequence> {
    if layer >= cfg.layers {
        return Err(Error::Argument(format!("layer {layer} out of {}", cfg.layers)));
    }
    let mid = msa_forward(ctx, seq, cfg, layer)?;
    expert_forward(ctx, &mid, cfg, layer)
}

/// Applies the first `layers` blocks in order.
pub fn encode_layers<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    cfg: &ModelConfig,
    layers: usize,
) -> Result<TokenSequence> {
    let mut cur = *seq;
    for l in 0..layers {
        cur = block_forward(ctx, &cur, cfg, l)?;
    }
    Ok(cur)
}

pub fn encode<T: Scalar>(ctx: &mut Ctx<'_, T>, seq: &TokenSequence, cfg: &ModelConfig) -> Result<TokenSequence> {
    encode_layers(ctx, seq, cfg, cfg.layers)
}

/// Token 0 of every sequence, `[batch, D]`.
pub fn cls_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, seq: &TokenSequence) -> Result<Var> {
    let idx = (0..seq.batch).map(|b| b * seq.len).collect();
    Ok(ctx.g.gather_rows(seq.var, idx)?)
}

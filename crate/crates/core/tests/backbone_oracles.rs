mod common;

use common::*;
use numcore::{Rng, Tensor};
use pcexpert::backbone::{block_forward, block_names, encode, encode_layers, msa_forward, msa_param_names};
use pcexpert::config::{ModelConfig, SharingMode};
use pcexpert::embed::{tokenize_cloud, Modality, TokenSequence};
use pcexpert::model::{image_features, point_features, Model};
use pcexpert::nn::{Ctx, GradPolicy};
use pcexpert::params::Owner;
use pcexpert::render::ImageRaster;

const TOL: f64 = 1e-6;

fn tokens(rng: &mut Rng, s: usize, d: usize) -> Vec<Vec<f64>> {
    (0..s).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

fn seq(ctx: &mut Ctx<'_, f64>, rows: &[Vec<f64>], batch: usize, modality: Modality) -> TokenSequence {
    let var = ctx.g.constant(Tensor::from_rows(rows)).unwrap();
    TokenSequence { var, batch, len: rows.len() / batch, modality }
}

fn rows_of(ctx: &Ctx<'_, f64>, s: &TokenSequence) -> Vec<Vec<f64>> {
    let t = ctx.g.value(s.var);
    (0..t.rows()).map(|r| row(t, r)).collect()
}

#[test]
fn single_token_attention_is_value_path() {
    let m = tiny_model(1);
    let cfg = m.cfg.clone();
    let x = tokens(&mut Rng::new(2), 1, cfg.dim);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &x, 1, Modality::Point);
    let out = msa_forward(&mut ctx, &s, &cfg, 0).unwrap();
    let ln = layernorm(&m, "blocks.0.ln1", &x[0], cfg.ln_eps);
    let v = linear(&m, "blocks.0.attn.v", &ln);
    let o = linear(&m, "blocks.0.attn.o", &v);
    let expect: Vec<f64> = o.iter().zip(&x[0]).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&rows_of(&ctx, &out)[0], &expect) < TOL);
}

#[test]
fn duplicated_tokens_give_duplicated_outputs() {
    let m = tiny_model(3);
    let cfg = m.cfg.clone();
    let t = tokens(&mut Rng::new(4), 1, cfg.dim).remove(0);
    let x = vec![t.clone(), t.clone(), t];
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &x, 1, Modality::Image);
    let out = { let o = block_forward(&mut ctx, &s, &cfg, 1).unwrap(); rows_of(&ctx, &o) };
    assert_eq!(out[0], out[1]);
    assert_eq!(out[1], out[2]);
}

#[test]
fn three_token_attention_matches_reference() {
    let m = tiny_model(5);
    let cfg = m.cfg.clone();
    let mut rng = Rng::new(6);
    // two sequences in one batch must not attend across each other
    let a = tokens(&mut rng, 3, cfg.dim);
    let b = tokens(&mut rng, 3, cfg.dim);
    let all: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &all, 2, Modality::Point);
    let out = { let o = msa_forward(&mut ctx, &s, &cfg, 1).unwrap(); rows_of(&ctx, &o) };
    let ra = msa_reference(&m, "blocks.1.ln1", "blocks.1.attn", &a, cfg.heads, cfg.ln_eps);
    let rb = msa_reference(&m, "blocks.1.ln1", "blocks.1.attn", &b, cfg.heads, cfg.ln_eps);
    for (got, want) in out.iter().zip(ra.iter().chain(&rb)) {
        assert!(max_abs_diff(got, want) < TOL);
    }
}

#[test]
fn expert_stage_matches_reference() {
    let m = tiny_model(7);
    let cfg = m.cfg.clone();
    let x = tokens(&mut Rng::new(8), 3, cfg.dim);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &x, 1, Modality::Point);
    let out = { let o = block_forward(&mut ctx, &s, &cfg, 0).unwrap(); rows_of(&ctx, &o) };
    let mid = msa_reference(&m, "blocks.0.ln1", "blocks.0.attn", &x, cfg.heads, cfg.ln_eps);
    for (got, h) in out.iter().zip(&mid) {
        let f = mlp2(&m, "blocks.0.point.ffn", &layernorm(&m, "blocks.0.point.ln", h, cfg.ln_eps));
        let want: Vec<f64> = f.iter().zip(h).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(got, &want) < TOL);
    }
}

#[test]
fn zero_ffn_output_exposes_attention_residual() {
    let mut m = tiny_model(9);
    let cfg = m.cfg.clone();
    for n in ["blocks.0.image.ffn.1.w", "blocks.0.image.ffn.1.b"] {
        m.params.get_mut(n).unwrap().tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = tokens(&mut Rng::new(10), 4, cfg.dim);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &x, 1, Modality::Image);
    let mid = { let o = msa_forward(&mut ctx, &s, &cfg, 0).unwrap(); rows_of(&ctx, &o) };
    let out = { let o = block_forward(&mut ctx, &s, &cfg, 0).unwrap(); rows_of(&ctx, &o) };
    assert_eq!(mid, out);
}

#[test]
fn modality_tag_routes_expert_only() {
    let m = tiny_model(11);
    let cfg = m.cfg.clone();
    let x = tokens(&mut Rng::new(12), 3, cfg.dim);
    let mut ctx = m.ctx(GradPolicy::None);
    let p = seq(&mut ctx, &x, 1, Modality::Point);
    let i = seq(&mut ctx, &x, 1, Modality::Image);
    assert_eq!({ let o = msa_forward(&mut ctx, &p, &cfg, 0).unwrap(); rows_of(&ctx, &o) }, { let o = msa_forward(&mut ctx, &i, &cfg, 0).unwrap(); rows_of(&ctx, &o) });
    assert_ne!({ let o = block_forward(&mut ctx, &p, &cfg, 0).unwrap(); rows_of(&ctx, &o) }, { let o = block_forward(&mut ctx, &i, &cfg, 0).unwrap(); rows_of(&ctx, &o) });
}

#[test]
fn point_path_never_reaches_image_expert() {
    let m = tiny_model(13);
    let cfg = m.cfg.clone();
    let groups = tokenize_cloud(&random_cloud(&mut Rng::new(14), 32), &cfg, &mut Rng::new(15)).unwrap();
    let mut ctx = m.ctx(GradPolicy::All);
    let image_expert: Vec<String> = m.params.names().into_iter().filter(|n| n.contains(".image.")).collect();
    assert!(!image_expert.is_empty());
    let bound: Vec<_> = image_expert.iter().map(|n| ctx.p(n).unwrap()).collect();
    let cls = pcexpert::model::point_cls(&mut ctx, &cfg, &[groups]).unwrap();
    let loss = ctx.g.sum(cls).unwrap();
    ctx.g.backward(loss).unwrap();
    for v in bound {
        if let Some(g) = ctx.g.grad(v) {
            assert!(g.iter().all(|x| *x == 0.0));
        }
    }
    let shared_grad = ctx.g.grad(ctx.bound()["blocks.0.attn.q.w"]).unwrap();
    assert!(shared_grad.iter().any(|x| *x != 0.0), "shared attention lies on the point path");
}

#[test]
fn zero_layers_is_identity_and_depth_composes() {
    let m = tiny_model(16);
    let cfg = m.cfg.clone();
    let x = tokens(&mut Rng::new(17), 5, cfg.dim);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = seq(&mut ctx, &x, 1, Modality::Point);
    assert_eq!(encode_layers(&mut ctx, &s, &cfg, 0).unwrap(), s);
    let one = { let o = encode_layers(&mut ctx, &s, &cfg, 1).unwrap(); rows_of(&ctx, &o) };
    assert_eq!(one, { let o = block_forward(&mut ctx, &s, &cfg, 0).unwrap(); rows_of(&ctx, &o) });
    let full = { let o = encode(&mut ctx, &s, &cfg).unwrap(); rows_of(&ctx, &o) };
    let mut manual = s;
    for l in 0..cfg.layers {
        manual = block_forward(&mut ctx, &manual, &cfg, l).unwrap();
    }
    assert_eq!(full, rows_of(&ctx, &manual));
    assert!(block_forward(&mut ctx, &s, &cfg, cfg.layers).is_err());
}

#[test]
fn sharing_modes_partition_attention() {
    let cfg = tiny_cfg();
    for l in 0..cfg.layers {
        assert_eq!(msa_param_names(&cfg, l, Modality::Point), msa_param_names(&cfg, l, Modality::Image));
    }
    let sep = ModelConfig { sharing: SharingMode::Separate, ..tiny_cfg() };
    let model: Model<f32> = Model::initialized(sep.clone(), 0).unwrap();
    for l in 0..sep.layers {
        for n in msa_param_names(&sep, l, Modality::Point) {
            assert_eq!(model.params.get(&n).unwrap().owner, Owner::Point);
        }
        assert_ne!(block_names(&sep, l, Modality::Point).attn, block_names(&sep, l, Modality::Image).attn);
    }
    let mut late: Model<f32> = Model::initialized(tiny_cfg(), 0).unwrap();
    assert!(late.set_sharing_mode(SharingMode::Separate).is_err());
}

#[test]
fn desk_forward_is_finite_under_fuzz() {
    const INPUTS: usize = 10_000;
    const CHUNK: usize = 250;
    let cfg = ModelConfig::desk();
    let model: Model<f32> = Model::initialized(cfg.clone(), 0).unwrap();
    let mut rng = Rng::new(18);
    for _ in 0..INPUTS / 2 / CHUNK {
        let groups: Vec<_> = (0..CHUNK)
            .map(|_| {
                let scale = rng.uniform_range(0.01, 10.0);
                let mut c = random_cloud(&mut rng, cfg.points);
                c.points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= scale as f32));
                tokenize_cloud(&c, &cfg, &mut rng).unwrap()
            })
            .collect();
        let f = point_features(&model, &groups).unwrap();
        assert!(f.iter().flatten().all(|v| v.is_finite()));
        let images: Vec<ImageRaster> = (0..CHUNK)
            .map(|_| {
                let mut img = ImageRaster::filled(cfg.image_size, cfg.image_size, 0.0);
                img.data.iter_mut().for_each(|v| *v = rng.uniform() as f32);
                img
            })
            .collect();
        let refs: Vec<&ImageRaster> = images.iter().collect();
        let f = image_features(&model, &refs).unwrap();
        assert!(f.iter().flatten().all(|v| v.is_finite()));
    }
}

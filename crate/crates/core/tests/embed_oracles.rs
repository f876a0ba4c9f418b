mod common;

use common::*;
use numcore::{Rng, Tensor};
use pcexpert::embed::{image_patchify, image_sequence, image_unpatchify, point_patch_embed, point_sequence, tokenize_cloud};
use pcexpert::geom::Point;
use pcexpert::nn::GradPolicy;
use pcexpert::render::ImageRaster;
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn embed_rows(m: &pcexpert::model::Model<f64>, groups: &[pcexpert::geom::PatchGroups]) -> Tensor<f64> {
    let mut ctx = m.ctx(GradPolicy::None);
    let z = point_patch_embed(&mut ctx, groups).unwrap();
    ctx.g.value(z).clone()
}

/// Two-stage shared MLP with max-pooling, evaluated point by point.
fn patch_reference(m: &pcexpert::model::Model<f64>, group: &[Point]) -> Vec<f64> {
    let c = group[0];
    let pool = |rows: Vec<Vec<f64>>| -> Vec<f64> {
        (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect()
    };
    let stage1 = group
        .iter()
        .map(|p| {
            let x: Vec<f64> = (0..3).map(|a| p[a] as f64).chain((0..3).map(|a| p[a] as f64 - c[a] as f64)).collect();
            mlp2(m, "point.f1", &x)
        })
        .collect();
    let z_tilde = pool(stage1);
    let stage2 =
        group.iter().map(|p| mlp2(m, "point.f2", &p.iter().map(|&v| v as f64).chain(z_tilde.iter().copied()).collect::<Vec<_>>())).collect();
    pool(stage2)
}

#[test]
fn two_group_patch_embedding_matches_reference() {
    let m = tiny_model(3);
    let mut rng = Rng::new(4);
    let groups: Vec<Vec<Point>> = (0..2).map(|_| (0..5).map(|_| [0; 3].map(|_| rng.normal() as f32)).collect()).collect();
    let pg = hand_groups(groups.clone());
    let out = embed_rows(&m, &[pg]);
    assert_eq!(out.shape(), &[2, 8]);
    for (i, g) in groups.iter().enumerate() {
        let err = max_abs_diff(&row(&out, i), &patch_reference(&m, g));
        assert!(err < TOL, "group {i}: {err}");
    }
}

#[test]
fn identical_points_reduce_to_single_point() {
    let m = tiny_model(5);
    let p = [0.3f32, -0.2, 0.7];
    let many = embed_rows(&m, &[hand_groups(vec![vec![p; 6]])]);
    let one = patch_reference(&m, &[p]);
    assert!(max_abs_diff(&row(&many, 0), &one) < TOL);
}

#[test]
fn within_group_permutation_leaves_embedding_unchanged() {
    let m = tiny_model(6);
    let mut rng = Rng::new(7);
    let g: Vec<Point> = (0..6).map(|_| [0; 3].map(|_| rng.normal() as f32)).collect();
    let mut shuffled = g.clone();
    shuffled[1..].reverse();
    let a = embed_rows(&m, &[hand_groups(vec![g])]);
    let b = embed_rows(&m, &[hand_groups(vec![shuffled])]);
    assert_eq!(a.data(), b.data());
}

#[test]
fn sequence_is_patch_embedding_plus_position_and_type() {
    let mut m = tiny_model(8);
    let cfg = m.cfg.clone();
    let groups = tokenize_cloud(&random_cloud(&mut Rng::new(9), 32), &cfg, &mut Rng::new(10)).unwrap();
    let raw = embed_rows(&m, std::slice::from_ref(&groups));

    let seq = {
        let mut ctx = m.ctx(GradPolicy::None);
        let s = point_sequence(&mut ctx, std::slice::from_ref(&groups)).unwrap();
        ctx.g.value(s.var).clone()
    };
    assert_eq!(seq.shape(), &[cfg.patches + 1, cfg.dim]);
    let cls = row(w(&m, "point.cls"), 0);
    let ty = row(w(&m, "point.type"), 0);
    let pos0 = mlp2(&m, "point.pos", &[0.0; 3]);
    let expect0: Vec<f64> = (0..cfg.dim).map(|j| cls[j] + ty[j] + pos0[j]).collect();
    assert!(max_abs_diff(&row(&seq, 0), &expect0) < TOL, "cls slot uses the origin as its position");

    for (_, p) in m.params.iter_mut().filter(|(n, _)| n.starts_with("point.pos") || n.starts_with("point.type")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut ctx = m.ctx(GradPolicy::None);
    let s = point_sequence(&mut ctx, std::slice::from_ref(&groups)).unwrap();
    let seq = ctx.g.value(s.var);
    for i in 0..cfg.patches {
        assert_eq!(row(seq, i + 1), row(&raw, i));
    }
}

#[test]
fn sequence_equivariant_to_point_order() {
    let m = tiny_model(11);
    let cfg = m.cfg.clone();
    let cloud = random_cloud(&mut Rng::new(12), 32);
    let groups = tokenize_cloud(&cloud, &cfg, &mut Rng::new(13)).unwrap();
    let mut permuted = groups.clone();
    for g in &mut permuted.groups {
        g[1..].rotate_left(1);
    }
    let run = |g: &pcexpert::geom::PatchGroups| {
        let mut ctx = m.ctx(GradPolicy::None);
        let s = point_sequence(&mut ctx, std::slice::from_ref(g)).unwrap();
        ctx.g.value(s.var).clone()
    };
    assert_eq!(run(&groups).data(), run(&permuted).data());
}

#[test]
fn patchify_layout_cases() {
    let mut img = ImageRaster::filled(4, 4, 0.0);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = i as f32;
    }
    let single = image_patchify(&img, 4).unwrap();
    assert_eq!(single, vec![img.data.clone()]);

    let patches = image_patchify(&img, 2).unwrap();
    assert_eq!(patches.len(), 4);
    let expect: Vec<f32> = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().flat_map(|&(y, x)| img.pixel(x, y)).collect();
    assert_eq!(patches[0], expect);
    assert!(image_patchify(&img, 3).is_err());
}

proptest! {
    #[test]
    fn patchify_roundtrip_is_exact(seed in 0u64..1000, p in 1usize..5, tiles in 1usize..4) {
        let n = p * tiles;
        let mut rng = Rng::new(seed);
        let mut img = ImageRaster::filled(n, n, 0.0);
        img.data.iter_mut().for_each(|v| *v = rng.uniform() as f32);
        let back = image_unpatchify(&image_patchify(&img, p).unwrap(), n, n, p).unwrap();
        prop_assert_eq!(back, img);
    }
}

#[test]
fn image_tokens_are_projection_plus_position_and_type() {
    let m = tiny_model(14);
    let cfg = m.cfg.clone();
    let mut rng = Rng::new(15);
    let mut img = ImageRaster::filled(cfg.image_size, cfg.image_size, 0.0);
    img.data.iter_mut().for_each(|v| *v = rng.uniform() as f32);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = image_sequence(&mut ctx, &[&img], &cfg).unwrap();
    let seq = ctx.g.value(s.var);
    assert_eq!(s.len, cfg.image_patches() + 1);
    let ty = row(w(&m, "image.type"), 0);
    let cls = row(w(&m, "image.cls"), 0);
    let pos = w(&m, "image.pos");
    let expect0: Vec<f64> = (0..cfg.dim).map(|j| cls[j] + row(pos, 0)[j] + ty[j]).collect();
    assert!(max_abs_diff(&row(seq, 0), &expect0) < TOL);
    for (i, patch) in image_patchify(&img, cfg.patch_size).unwrap().iter().enumerate() {
        let x: Vec<f64> = patch.iter().map(|&v| v as f64).collect();
        let vx = linear(&m, "image.proj", &x);
        let expect: Vec<f64> = (0..cfg.dim).map(|j| vx[j] + row(pos, i + 1)[j] + ty[j]).collect();
        assert!(max_abs_diff(&row(seq, i + 1), &expect) < TOL, "patch {i}");
    }
}

#[test]
fn zero_image_tokens_differ_only_by_position() {
    let m = tiny_model(16);
    let cfg = m.cfg.clone();
    let img = ImageRaster::filled(cfg.image_size, cfg.image_size, 0.0);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = image_sequence(&mut ctx, &[&img], &cfg).unwrap();
    let seq = ctx.g.value(s.var);
    let ty = row(w(&m, "image.type"), 0);
    let pos = w(&m, "image.pos");
    for i in 1..s.len {
        let expect: Vec<f64> = (0..cfg.dim).map(|j| row(pos, i)[j] + ty[j]).collect();
        assert_eq!(row(seq, i), expect);
    }
}

#[test]
fn pixel_standardization_is_applied_before_projection() {
    let mut m = tiny_model(17);
    m.cfg.pixel_mean = 0.5;
    m.cfg.pixel_std = 0.25;
    let cfg = m.cfg.clone();
    let img = ImageRaster::filled(cfg.image_size, cfg.image_size, 0.75);
    let mut ctx = m.ctx(GradPolicy::None);
    let s = image_sequence(&mut ctx, &[&img], &cfg).unwrap();
    let seq = ctx.g.value(s.var);
    let vx = linear(&m, "image.proj", &vec![1.0; cfg.patch_len()]);
    let ty = row(w(&m, "image.type"), 0);
    let expect: Vec<f64> = (0..cfg.dim).map(|j| vx[j] + row(w(&m, "image.pos"), 1)[j] + ty[j]).collect();
    assert!(max_abs_diff(&row(seq, 1), &expect) < TOL);
}

//! Shared fixtures and loop-based 64-bit reference evaluations.
#![allow(dead_code)]

use numcore::{Rng, Tensor};
use pcexpert::config::ModelConfig;
use pcexpert::geom::{PatchGroups, Point, PointCloud};
use pcexpert::model::Model;

/// A model small enough for exhaustive reference checks.
pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        expert_dim: 4,
        image_ffn_dim: 16,
        points: 32,
        patches: 4,
        group_size: 4,
        pos_hidden: 8,
        proj_dim: 8,
        angle_bins: 4,
        image_size: 8,
        patch_size: 4,
        pixel_mean: 0.0,
        pixel_std: 1.0,
        ..ModelConfig::desk()
    }
}

pub fn tiny_model(seed: u64) -> Model<f64> {
    let mut m: Model<f64> = Model::initialized(tiny_cfg(), seed).unwrap();
    randomize_zero_params(&mut m, seed);
    m
}

/// Biases and LayerNorm parameters start at constants; perturb them so the
/// reference checks exercise every term.
pub fn randomize_zero_params(m: &mut Model<f64>, seed: u64) {
    let mut rng = Rng::new(seed).split(99);
    for (_, p) in m.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
}

pub fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    let pts: Vec<Point> = (0..n).map(|_| [0; 3].map(|_| rng.uniform_range(-1.0, 1.0) as f32)).collect();
    PointCloud::new(pts).unwrap()
}

pub fn w<'a>(m: &'a Model<f64>, name: &str) -> &'a Tensor<f64> {
    &m.params.get(name).unwrap().tensor
}

pub fn row(t: &Tensor<f64>, r: usize) -> Vec<f64> {
    let d = t.last_dim();
    t.data()[r * d..(r + 1) * d].to_vec()
}

pub fn linear(m: &Model<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let wt = w(m, &format!("{name}.w"));
    let (fi, fo) = (wt.shape()[0], wt.shape()[1]);
    assert_eq!(x.len(), fi);
    let mut y = vec![0.0; fo];
    for (o, yo) in y.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *yo += xi * wt.data()[i * fo + o];
        }
    }
    if let Ok(b) = m.params.get(&format!("{name}.b")) {
        for (yo, bo) in y.iter_mut().zip(b.tensor.data()) {
            *yo += bo;
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp2(m: &Model<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(m, &format!("{name}.0"), x).into_iter().map(gelu).collect();
    linear(m, &format!("{name}.1"), &h)
}

pub fn layernorm(m: &Model<f64>, name: &str, x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (w(m, &format!("{name}.g")).data(), w(m, &format!("{name}.b")).data());
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i]).collect()
}

/// `MSA(LN(H)) + H` for one sequence, by explicit loops.
pub fn msa_reference(m: &Model<f64>, prefix_ln: &str, prefix_attn: &str, tokens: &[Vec<f64>], heads: usize, eps: f64) -> Vec<Vec<f64>> {
    let d = tokens[0].len();
    let dh = d / heads;
    let x: Vec<Vec<f64>> = tokens.iter().map(|t| layernorm(m, prefix_ln, t, eps)).collect();
    let proj = |p: &str| -> Vec<Vec<f64>> { x.iter().map(|t| linear(m, &format!("{prefix_attn}.{p}"), t)).collect() };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    let s = tokens.len();
    let mut ctx = vec![vec![0.0; d]; s];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    ctx.iter()
        .zip(tokens)
        .map(|(c, t)| linear(m, &format!("{prefix_attn}.o"), c).iter().zip(t).map(|(a, b)| a + b).collect())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Groups built by hand: the centroid first, then its members.
pub fn hand_groups(groups: Vec<Vec<Point>>) -> PatchGroups {
    let centroids = groups.iter().map(|g| g[0]).collect();
    let k = groups[0].len() - 1;
    PatchGroups {
        centroids,
        centroid_indices: (0..groups.len()).collect(),
        member_indices: vec![(0..k).collect(); groups.len()],
        groups,
    }
}

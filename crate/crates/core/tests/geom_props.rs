use numcore::Rng;
use pcexpert::data::{DataConfig, Dataset};
use pcexpert::geom::{farthest_point_sample_from, knn_group, normalize, rotate_y, synth_shape, Point, PointCloud, ShapeClass, ShapeSpec};
use pcexpert::render::{render_cloud, RenderConfig};
use proptest::prelude::*;

fn cloud_from(seed: u64, m: usize) -> PointCloud {
    let mut r = Rng::new(seed);
    PointCloud::new((0..m).map(|_| [0; 3].map(|_| r.uniform_range(-1.0, 1.0) as f32)).collect()).unwrap()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// Greedy max-min selection, recomputing every distance from scratch.
fn fps_oracle(c: &PointCloud, n: usize, start: usize) -> Vec<usize> {
    let mut out = vec![start];
    while out.len() < n {
        let score = |i: usize| out.iter().map(|&j| d2(&c.points[i], &c.points[j])).fold(f64::INFINITY, f64::min);
        let mut best = None;
        for i in (0..c.len()).filter(|i| !out.contains(i)) {
            if best.is_none_or(|b| score(i) > score(b)) {
                best = Some(i);
            }
        }
        out.push(best.unwrap());
    }
    out
}

proptest! {
    #[test]
    fn fps_matches_greedy_oracle(seed in 0u64..2000, m in 2usize..=32, frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
        let c = cloud_from(seed, m);
        let n = 1 + ((m - 1) as f64 * frac) as usize;
        let start = ((m as f64 * start_frac) as usize).min(m - 1);
        prop_assert_eq!(farthest_point_sample_from(&c, n, start).unwrap(), fps_oracle(&c, n, start));
    }

    #[test]
    fn knn_is_permutation_equivariant(seed in 0u64..2000, m in 4usize..40, k in 1usize..8) {
        let c = cloud_from(seed, m);
        let k = k.min(m);
        let cents: Vec<usize> = (0..m).step_by(3).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        Rng::new(seed ^ 0xabc).shuffle(&mut perm);
        let shuffled = PointCloud::new(perm.iter().map(|&i| c.points[i]).collect()).unwrap();
        let inverse: Vec<usize> = { let mut v = vec![0; m]; for (new, &old) in perm.iter().enumerate() { v[old] = new; } v };
        let a = knn_group(&c, &cents, k).unwrap();
        let b = knn_group(&shuffled, &cents.iter().map(|&i| inverse[i]).collect::<Vec<_>>(), k).unwrap();
        for (ga, gb) in a.member_indices.iter().zip(&b.member_indices) {
            let mut sa = ga.clone();
            let mut sb: Vec<usize> = gb.iter().map(|&i| perm[i]).collect();
            sa.sort();
            sb.sort();
            prop_assert_eq!(sa, sb);
        }
        for g in &a.groups {
            prop_assert_eq!(g.len(), k + 1);
        }
    }

    #[test]
    fn rotation_preserves_distances_and_height(seed in 0u64..2000, theta in -720.0f64..720.0) {
        let c = cloud_from(seed, 12);
        let r = rotate_y(&c, theta);
        for i in 0..c.len() {
            prop_assert_eq!(r.points[i][1], c.points[i][1]);
            for j in 0..i {
                prop_assert!((d2(&c.points[i], &c.points[j]).sqrt() - d2(&r.points[i], &r.points[j]).sqrt()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rotations_compose(seed in 0u64..1000, a in 0.0f64..360.0, b in 0.0f64..360.0) {
        let c = cloud_from(seed, 10);
        let two = rotate_y(&rotate_y(&c, a), b);
        let one = rotate_y(&c, a + b);
        for (p, q) in two.points.iter().zip(&one.points) {
            prop_assert!(d2(p, q).sqrt() < 1e-5);
        }
    }

    #[test]
    fn normalize_centers_and_scales(seed in 0u64..2000, m in 2usize..64, scale in 0.01f32..100.0) {
        let mut c = cloud_from(seed, m);
        c.points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = *v * scale + 3.0));
        let n = normalize(&c);
        let cen = n.centroid();
        prop_assert!(cen.iter().all(|v| v.abs() < 1e-5));
        let r = n.points.iter().map(|p| d2(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        prop_assert!((r - 1.0).abs() < 1e-5);
    }

    #[test]
    fn render_is_pure_and_periodic(seed in 0u64..500, yaw in 0.0f64..360.0) {
        let c = cloud_from(seed, 64);
        let cfg = RenderConfig::desk();
        prop_assert_eq!(render_cloud(&c, yaw, &cfg), render_cloud(&c, yaw, &cfg));
        prop_assert_eq!(render_cloud(&c, 0.0, &cfg), render_cloud(&c, 360.0, &cfg));
    }
}

#[test]
fn distinct_classes_render_differently() {
    let cfg = RenderConfig::desk();
    let images: Vec<_> = ShapeClass::ALL
        .iter()
        .map(|&class| {
            let spec = ShapeSpec { class, scale_jitter: 0.0, noise: 0.0, points: 512 };
            render_cloud(&synth_shape(&spec, &mut Rng::new(1)).unwrap(), 0.0, &cfg)
        })
        .collect();
    let pixels = cfg.width * cfg.height;
    for i in 0..images.len() {
        for j in 0..i {
            let differ = (0..pixels).filter(|&p| images[i].data[p * 3] != images[j].data[p * 3]).count();
            assert!(differ * 20 >= pixels, "{:?} vs {:?}: {differ} px", ShapeClass::ALL[i], ShapeClass::ALL[j]);
        }
    }
}

fn files(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_is_reproducible_from_seed() {
    let cfg = DataConfig::default();
    let a = Dataset::generate(&cfg).unwrap();
    let b = Dataset::generate(&cfg).unwrap();
    assert_eq!(a.samples.len(), 720);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    a.write(dir_a.path(), Some(&cfg)).unwrap();
    b.write(dir_b.path(), Some(&cfg)).unwrap();
    let (fa, fb) = (files(dir_a.path()), files(dir_b.path()));
    assert_eq!(fa.len(), 721);
    assert_eq!(fa, fb);
    let other = Dataset::generate(&DataConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(other.samples[0].cloud, a.samples[0].cloud);
}

//! Point-cloud geometry: farthest point sampling, kNN grouping, yaw
//! rotation, unit-sphere normalization and a synthetic labeled shape family.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numcore::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Plain-text form: one `x y z` line per point, shortest round-trip
    /// decimal representation.
    pub fn to_xyz(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        s
    }

    pub fn from_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f32> = line
                .split_whitespace()
                .map(f32::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Data(format!("line {}: expected 3 values, got {}", lineno + 1, vals.len())));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        PointCloud::new(points).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_xyz(&text)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        c.map(|v| v / n)
    }
}

/// Local patches around FPS centroids. Each group holds `k + 1` points with
/// the centroid at slot 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGroups {
    pub centroids: Vec<Point>,
    pub groups: Vec<Vec<Point>>,
    pub centroid_indices: Vec<usize>,
    /// Source-cloud indices of the `k` neighbours of each group.
    pub member_indices: Vec<Vec<usize>>,
}

impl PatchGroups {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_len(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// Greedy max-min subset of `n` indices starting from a random point.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 || n > cloud.len() {
        return Err(Error::Argument(format!("cannot sample {n} centroids from {} points", cloud.len())));
    }
    let start = rng.below(cloud.len());
    farthest_point_sample_from(cloud, n, start)
}

/// Deterministic FPS from a given start index. Each step picks the unchosen
/// point with the largest distance to the chosen set; ties go to the lowest
/// index.
pub fn farthest_point_sample_from(cloud: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let m = cloud.len();
    if n == 0 || n > m || start >= m {
        return Err(Error::Argument(format!("cannot sample {n} centroids from {m} points starting at {start}")));
    }
    let mut chosen = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut out = Vec::with_capacity(n);
    let mut cur = start;
    loop {
        chosen[cur] = true;
        out.push(cur);
        if out.len() == n {
            break;
        }
        let c = cloud.points[cur];
        let mut best: Option<usize> = None;
        for i in 0..m {
            let d = dist2(&cloud.points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        cur = best.expect("n <= m leaves an unchosen point");
    }
    Ok(out)
}

/// Groups each centroid with its `k` nearest cloud points (the centroid
/// itself is eligible). Distance ties go to the lowest index.
pub fn knn_group(cloud: &PointCloud, centroid_indices: &[usize], k: usize) -> Result<PatchGroups> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(Error::Argument(format!("k = {k} neighbours requested from {m} points")));
    }
    if let Some(&bad) = centroid_indices.iter().find(|&&c| c >= m) {
        return Err(Error::Argument(format!("centroid index {bad} out of range")));
    }
    let mut centroids = Vec::with_capacity(centroid_indices.len());
    let mut groups = Vec::with_capacity(centroid_indices.len());
    let mut members = Vec::with_capacity(centroid_indices.len());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
    for &ci in centroid_indices {
        let c = cloud.points[ci];
        order.clear();
        order.extend(cloud.points.iter().enumerate().map(|(i, p)| (dist2(p, &c), i)));
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nearest: Vec<(f64, usize)> = order[..k].to_vec();
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let idx: Vec<usize> = nearest.iter().map(|&(_, i)| i).collect();
        let mut g = Vec::with_capacity(k + 1);
        g.push(c);
        g.extend(idx.iter().map(|&i| cloud.points[i]));
        centroids.push(c);
        groups.push(g);
        members.push(idx);
    }
    Ok(PatchGroups { centroids, groups, centroid_indices: centroid_indices.to_vec(), member_indices: members })
}

/// FPS followed by kNN grouping.
pub fn tokenize(cloud: &PointCloud, num_patches: usize, k: usize, rng: &mut Rng) -> Result<PatchGroups> {
    let idx = farthest_point_sample(cloud, num_patches, rng)?;
    knn_group(cloud, &idx, k)
}

/// Right-handed rotation about the y axis (y up) by `theta_deg`, taken mod 360.
pub fn rotate_y(cloud: &PointCloud, theta_deg: f64) -> PointCloud {
    let t = theta_deg.rem_euclid(360.0).to_radians();
    let (s, c) = t.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, z) = (p[0] as f64, p[2] as f64);
            [(x * c + z * s) as f32, p[1], (-x * s + z * c) as f32]
        })
        .collect();
    PointCloud { points, label: cloud.label }
}

/// Centers on the centroid and scales the farthest point to radius 1. A cloud
/// of identical points is only centered.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
        .collect();
    let r = centered.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    let scale = if r > 0.0 { 1.0 / r } else { 1.0 };
    let points = centered.iter().map(|p| p.map(|v| (v * scale) as f32)).collect();
    PointCloud { points, label: cloud.label }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Pyramid,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Per-axis scale factors are drawn from `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
    /// Gaussian coordinate noise standard deviation.
    pub noise: f64,
    pub points: usize,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) || self.points < 8 || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Argument(format!("invalid shape spec {self:?}")));
        }
        Ok(())
    }
}

const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;

fn unit_disk(rng: &mut Rng) -> (f64, f64) {
    let r = rng.uniform().sqrt();
    let a = 2.0 * PI * rng.uniform();
    (r * a.cos(), r * a.sin())
}

fn triangle(rng: &mut Rng, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let (u, v) = (rng.uniform(), rng.uniform());
    let su = u.sqrt();
    let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
    [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i])
}

/// One point drawn uniformly (by area) from the canonical surface of `class`,
/// all of which fit in `[-1, 1]^3` with y up.
fn surface_point(class: ShapeClass, rng: &mut Rng) -> [f64; 3] {
    match class {
        ShapeClass::Sphere => loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break v.map(|x| x / n);
            }
        },
        ShapeClass::Cube => {
            let face = rng.below(6);
            let (u, v) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
            let s = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeClass::Cylinder => {
            // side area 4 pi, caps 2 pi
            if rng.uniform() < 2.0 / 3.0 {
                let a = 2.0 * PI * rng.uniform();
                [a.cos(), rng.uniform_range(-1.0, 1.0), a.sin()]
            } else {
                let (x, z) = unit_disk(rng);
                let y = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                [x, y, z]
            }
        }
        ShapeClass::Cone => {
            // apex (0, 1, 0), base radius 1 at y = -1; lateral area pi*sqrt(5), base pi
            let s5 = 5f64.sqrt();
            if rng.uniform() < s5 / (1.0 + s5) {
                let t = rng.uniform().sqrt();
                let a = 2.0 * PI * rng.uniform();
                [t * a.cos(), 1.0 - 2.0 * t, t * a.sin()]
            } else {
                let (x, z) = unit_disk(rng);
                [x, -1.0, z]
            }
        }
        ShapeClass::Torus => loop {
            let u = 2.0 * PI * rng.uniform();
            let v = 2.0 * PI * rng.uniform();
            let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.uniform() <= w {
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                break [ring * u.cos(), TORUS_MINOR * v.sin(), ring * u.sin()];
            }
        },
        ShapeClass::Pyramid => {
            // four faces of area sqrt(5) each plus a base of area 4
            let s5 = 5f64.sqrt();
            let apex = [0.0, 1.0, 0.0];
            let corners = [[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]];
            if rng.uniform() < 4.0 * s5 / (4.0 * s5 + 4.0) {
                let f = rng.below(4);
                triangle(rng, apex, corners[f], corners[(f + 1) % 4])
            } else {
                [rng.uniform_range(-1.0, 1.0), -1.0, rng.uniform_range(-1.0, 1.0)]
            }
        }
    }
}

/// Surface samples before jitter, noise and normalization.
pub fn raw_surface(class: ShapeClass, points: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..points).map(|_| surface_point(class, rng)).collect()
}

/// Samples `spec.points` surface points, applies per-axis scale jitter and
/// Gaussian noise, normalizes, and labels the cloud with the class id.
pub fn synth_shape(spec: &ShapeSpec, rng: &mut Rng) -> Result<PointCloud> {
    spec.validate()?;
    let raw = raw_surface(spec.class, spec.points, rng);
    let scale = [0; 3].map(|_| 1.0 + spec.scale_jitter * rng.uniform_range(-1.0, 1.0));
    let points: Vec<Point> = raw
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] * scale[a] + spec.noise * rng.normal()) as f32))
        .collect();
    let cloud = PointCloud { points, label: Some(spec.class.id()) };
    Ok(normalize(&cloud))
}

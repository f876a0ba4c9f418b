//! Orthographic point-splat rasterizer and SSRL triplet construction.

use std::io::Write;
use std::path::Path;

use numcore::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotate_y, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Intensity of the farthest possible point.
    pub shade_base: f32,
    /// Added intensity at the nearest possible point.
    pub shade_span: f32,
    pub background: f32,
}

impl RenderConfig {
    pub fn desk() -> Self {
        Self { width: 32, height: 32, shade_base: 0.25, shade_span: 0.75, background: 1.0 }
    }

    pub fn paper() -> Self {
        Self { width: 224, height: 224, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        if self.width == 0
            || self.height == 0
            || !in_unit(self.shade_base)
            || !in_unit(self.shade_base + self.shade_span)
            || self.shade_span < 0.0
            || !in_unit(self.background)
        {
            return Err(Error::Config(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

/// Row-major RGB raster with channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageRaster {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self { width, height, data: vec![v; width * height * Self::CHANNELS] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * Self::CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// Parses a binary P6 file with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Data(format!("PPM header: {e}")));
        if fields[0] != "P6" || parse(&fields[3])? != 255 {
            return Err(Error::Data("only P6 with maxval 255 is supported".into()));
        }
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != w * h * 3 {
            return Err(Error::Data(format!("PPM body has {} bytes, expected {}", body.len(), w * h * 3)));
        }
        Ok(Self { width: w, height: h, data: body.iter().map(|&b| b as f32 / 255.0).collect() })
    }
}

fn pixel_of(v: f32, extent: usize, flip: bool) -> usize {
    let t = if flip { (1.0 - v as f64) / 2.0 } else { (v as f64 + 1.0) / 2.0 };
    ((t * extent as f64).floor().max(0.0) as usize).min(extent - 1)
}

/// Rotates by `yaw_deg`, projects onto the xy-plane as seen from +z, and
/// keeps the point with the largest z per pixel (first point wins exact ties).
pub fn render_cloud(cloud: &PointCloud, yaw_deg: f64, cfg: &RenderConfig) -> ImageRaster {
    let rotated = rotate_y(cloud, yaw_deg);
    let (w, h) = (cfg.width, cfg.height);
    let mut depth = vec![f32::NEG_INFINITY; w * h];
    for p in &rotated.points {
        let px = pixel_of(p[0], w, false);
        let py = pixel_of(p[1], h, true);
        let slot = &mut depth[py * w + px];
        if p[2] > *slot {
            *slot = p[2];
        }
    }
    let mut img = ImageRaster::filled(w, h, cfg.background);
    for (i, &z) in depth.iter().enumerate() {
        if z.is_finite() {
            let t = ((z + 1.0) / 2.0).clamp(0.0, 1.0);
            let v = (cfg.shade_base + cfg.shade_span * t).clamp(0.0, 1.0);
            img.data[i * 3..i * 3 + 3].fill(v);
        }
    }
    img
}

/// One SSRL example: the cloud, its yaw-rotated copy, the render at that yaw
/// and the yaw itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub original: PointCloud,
    pub rotated: PointCloud,
    pub image: ImageRaster,
    pub theta_deg: f64,
}

pub fn make_triplet(cloud: &PointCloud, rng: &mut Rng, cfg: &RenderConfig) -> Triplet {
    let theta = rng.uniform() * 360.0;
    make_triplet_at(cloud, theta, cfg)
}

pub fn make_triplet_at(cloud: &PointCloud, theta_deg: f64, cfg: &RenderConfig) -> Triplet {
    Triplet {
        original: cloud.clone(),
        rotated: rotate_y(cloud, theta_deg),
        image: render_cloud(cloud, theta_deg, cfg),
        theta_deg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{synth_shape, ShapeClass, ShapeSpec};

    fn pc(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn non_white(img: &ImageRaster) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in 0..img.height {
            for x in 0..img.width {
                if img.pixel(x, y)[0] != 1.0 {
                    v.push((x, y));
                }
            }
        }
        v
    }

    #[test]
    fn origin_point_hits_center() {
        let img = render_cloud(&pc(&[[0.0; 3]]), 0.0, &RenderConfig::desk());
        assert_eq!(non_white(&img), vec![(16, 16)]);
        assert_eq!(img.pixel(16, 16), [0.625; 3]);
    }

    #[test]
    fn periodic_in_yaw() {
        let s = ShapeSpec { class: ShapeClass::Cube, scale_jitter: 0.2, noise: 0.01, points: 256 };
        let c = synth_shape(&s, &mut Rng::new(1)).unwrap();
        let cfg = RenderConfig::desk();
        assert_eq!(render_cloud(&c, 0.0, &cfg), render_cloud(&c, 360.0, &cfg));
    }

    #[test]
    fn nearer_point_wins_regardless_of_order() {
        let cfg = RenderConfig::desk();
        let near = [0.1, 0.1, 0.8];
        let far = [0.1, 0.1, -0.4];
        let a = render_cloud(&pc(&[near, far]), 0.0, &cfg);
        let b = render_cloud(&pc(&[far, near]), 0.0, &cfg);
        assert_eq!(a, b);
        let lone = render_cloud(&pc(&[near]), 0.0, &cfg);
        assert_eq!(a, lone);
    }

    #[test]
    fn nearer_is_never_darker() {
        let cfg = RenderConfig::desk();
        let mut prev = 0.0;
        for i in 0..=20 {
            let z = -1.0 + i as f32 * 0.1;
            let v = render_cloud(&pc(&[[0.0, 0.0, z]]), 0.0, &cfg).pixel(16, 16)[0];
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn corner_points_are_clamped() {
        let img = render_cloud(&pc(&[[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]]), 0.0, &RenderConfig::desk());
        assert_eq!(non_white(&img), vec![(0, 0), (31, 31)]);
    }

    #[test]
    fn triplet_at_zero_is_identity() {
        let cfg = RenderConfig::desk();
        let c = pc(&[[0.3, 0.2, 0.1], [-0.5, 0.0, 0.4]]);
        let t = make_triplet_at(&c, 0.0, &cfg);
        assert_eq!(t.rotated, c);
        assert_eq!(t.image, render_cloud(&c, 0.0, &cfg));
    }

    #[test]
    fn triplets_with_different_angles_share_original() {
        let cfg = RenderConfig::desk();
        let s = ShapeSpec { class: ShapeClass::Pyramid, scale_jitter: 0.2, noise: 0.0, points: 256 };
        let c = synth_shape(&s, &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(9);
        let a = make_triplet(&c, &mut rng, &cfg);
        let b = make_triplet(&c, &mut rng, &cfg);
        assert_eq!(a.original, b.original);
        assert_ne!(a.rotated, b.rotated);
        assert_ne!(a.image, b.image);
        assert!((0.0..360.0).contains(&a.theta_deg));
    }

    #[test]
    fn ppm_roundtrip() {
        let img = render_cloud(&pc(&[[0.0, 0.5, 1.0]]), 0.0, &RenderConfig::desk());
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        let back = ImageRaster::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
        assert!(ImageRaster::from_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = RenderConfig::desk();
        c.shade_span = 0.9;
        assert!(c.validate().is_err());
        assert!(RenderConfig::paper().validate().is_ok());
    }
}

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shapes::AnalyticShape;
use crate::error::{Error, Result};
use crate::geometry::{look_at, RigidTransform, Vec3};
use crate::rng;

const RELAXATION: f64 = 0.9;
const MAX_STEPS: usize = 256;
const HIT_EPS: f64 = 1e-4;
const REFINE_STEPS: usize = 16;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the given horizontal field of view (radians) and
    /// the principal point at `(width/2, height/2)`.
    pub fn from_fov(width: usize, height: usize, fov: f64) -> Self {
        let f = width as f64 / (2.0 * (0.5 * fov).tan());
        Intrinsics {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidArgument(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Intrinsics plus the camera-from-canonical transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub camera_from_canonical: RigidTransform,
}

impl Camera {
    /// Camera at `eye` (canonical frame) looking at the origin with +z up.
    pub fn looking_at_origin(eye: Vec3, intrinsics: Intrinsics) -> Self {
        let r_wc = look_at(&eye, &Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0));
        let canonical_from_camera = RigidTransform::new(r_wc, eye);
        Camera {
            intrinsics,
            camera_from_canonical: canonical_from_camera.inverse(),
        }
    }

    pub fn center(&self) -> Vec3 {
        self.camera_from_canonical.inverse().translation
    }
}

/// Camera on the upper viewing hemisphere at `distance` from the origin.
pub fn sample_view(distance: f64, intrinsics: Intrinsics, seed: u64) -> Camera {
    let mut r = rng::stream(seed, "view");
    let phi = r.random_range(0.0..std::f64::consts::TAU);
    // uniform on the hemisphere, kept away from the pole and the horizon
    let cos_t: f64 = r.random_range(0.1..0.95);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    let eye = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t) * distance;
    Camera::looking_at_origin(eye, intrinsics)
}

/// Depth map with z-depth per pixel (0 where invalid) and an object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height × width`.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub intrinsics: Intrinsics,
    pub camera_from_canonical: RigidTransform,
}

impl DepthImage {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.width * self.height;
        if self.depth.len() != n || self.mask.len() != n {
            return Err(Error::Structural("depth image buffers do not match its size".into()));
        }
        if let Some(i) = (0..n).find(|&i| self.mask[i] && !(self.depth[i] > 0.0)) {
            return Err(Error::Structural(format!("masked pixel {i} has no positive depth")));
        }
        Ok(())
    }
}

fn trace(shape: &AnalyticShape, origin: &Vec3, dir: &Vec3, radius: f64) -> Option<f64> {
    // entry/exit of the bounding sphere
    let b = origin.dot(dir);
    let c = origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t_far = -b + sq;
    if t_far < 0.0 {
        return None;
    }
    let mut t = (-b - sq).max(0.0);
    for _ in 0..MAX_STEPS {
        let d = shape.sdf(&(origin + dir * t));
        if d < HIT_EPS {
            for _ in 0..REFINE_STEPS {
                let d = shape.sdf(&(origin + dir * t));
                if d.abs() < 1e-12 {
                    break;
                }
                t += d;
            }
            return Some(t);
        }
        t += RELAXATION * d;
        if t > t_far {
            return None;
        }
    }
    None
}

/// Sphere-traced depth image of `shape`, with optional Gaussian depth noise.
pub fn render_depth(
    shape: &AnalyticShape,
    camera: &Camera,
    width: usize,
    height: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<DepthImage> {
    camera.intrinsics.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let origin = camera.center();
    if shape.sdf(&origin) <= 0.0 {
        return Err(Error::InvalidArgument("camera is inside the shape".into()));
    }
    let radius = shape.aabb().bounding_radius() + 1e-6;
    let rot_t = camera.camera_from_canonical.rotation.transpose();
    let k = camera.intrinsics;
    let depth: Vec<f64> = (0..height)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..width).map(move |u| {
                let ray = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let len = ray.norm();
                let dir = rot_t * ray / len;
                trace(shape, &origin, &dir, radius).map_or(0.0, |t| t / len)
            })
        })
        .collect();
    let mut img = DepthImage {
        width,
        height,
        mask: depth.iter().map(|d| *d > 0.0).collect(),
        depth,
        intrinsics: k,
        camera_from_canonical: camera.camera_from_canonical,
    };
    if noise_sigma > 0.0 {
        let mut r = rng::stream(seed, "depth-noise");
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for (d, m) in img.depth.iter_mut().zip(&mut img.mask) {
            if *m {
                *d += normal.sample(&mut r);
                if *d <= 0.0 {
                    *d = 0.0;
                    *m = false;
                }
            }
        }
    }
    Ok(img)
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

struct MaskSums {
    w: usize,
    sums: Vec<usize>,
}

impl MaskSums {
    fn new(img: &DepthImage) -> Self {
        let w = img.width + 1;
        let mut sums = vec![0; w * (img.height + 1)];
        for y in 0..img.height {
            for x in 0..img.width {
                sums[(y + 1) * w + x + 1] =
                    img.mask[y * img.width + x] as usize + sums[y * w + x + 1] + sums[(y + 1) * w + x]
                        - sums[y * w + x];
            }
        }
        MaskSums { w, sums }
    }

    fn count(&self, r: &PixelRect) -> usize {
        let s = |x: usize, y: usize| self.sums[y * self.w + x];
        s(r.x1, r.y1) + s(r.x0, r.y0) - s(r.x0, r.y1) - s(r.x1, r.y0)
    }
}

const OCCLUSION_TRIALS: usize = 4000;

/// Invalidate the masked pixels inside a random rectangle that covers
/// `ratio` of the object's pixels (within 2% of the target count).
pub fn occlude(img: &DepthImage, ratio: f64, seed: u64) -> Result<(DepthImage, PixelRect)> {
    if !(0.05..=0.85).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "occlusion ratio {ratio} outside [0.05, 0.85]"
        )));
    }
    occlude_unchecked(img, ratio, seed)
}

pub(crate) fn occlude_unchecked(img: &DepthImage, ratio: f64, seed: u64) -> Result<(DepthImage, PixelRect)> {
    img.validate()?;
    let empty = PixelRect {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };
    let total = img.valid_count();
    let target = (ratio * total as f64).round() as usize;
    if target == 0 {
        return Ok((img.clone(), empty));
    }
    let tol = 0.02 * target as f64;
    let sums = MaskSums::new(img);
    let mut r = rng::stream(seed, "occlusion");
    let mut best: Option<(f64, PixelRect)> = None;
    for _ in 0..OCCLUSION_TRIALS {
        let x0 = r.random_range(0..img.width);
        let y0 = r.random_range(0..img.height);
        let x1 = r.random_range(x0 + 1..=img.width);
        // count grows with the bottom edge; binary search for the target
        let (mut lo, mut hi) = (y0 + 1, img.height);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sums.count(&PixelRect { x0, y0, x1, y1: mid }) < target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        for y1 in [lo.saturating_sub(1).max(y0 + 1), lo] {
            let rect = PixelRect { x0, y0, x1, y1 };
            let err = (sums.count(&rect) as f64 - target as f64).abs();
            if best.is_none_or(|(e, _)| err < e) {
                best = Some((err, rect));
            }
        }
        if best.is_some_and(|(e, _)| e <= tol) {
            break;
        }
    }
    let (err, rect) = best.expect("at least one trial");
    if err > tol {
        return Err(Error::Degenerate(format!(
            "no rectangle covers {target} of {total} object pixels within 2%"
        )));
    }
    let mut out = img.clone();
    for v in rect.y0..rect.y1 {
        for u in rect.x0..rect.x1 {
            let i = v * img.width + u;
            out.mask[i] = false;
            out.depth[i] = 0.0;
        }
    }
    Ok((out, rect))
}

/// JSON sidecar stored next to a PFM depth map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthMeta {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub camera_from_canonical: RigidTransform,
    /// Alternating run lengths of the row-major mask, starting with `false`.
    pub mask_rle: Vec<usize>,
}

pub fn mask_to_rle(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut n = 0;
    for &m in mask {
        if m != current {
            runs.push(n);
            current = m;
            n = 0;
        }
        n += 1;
    }
    runs.push(n);
    runs
}

pub fn rle_to_mask(runs: &[usize], len: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(len);
    for (i, &n) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    if mask.len() != len {
        return Err(Error::Format(format!("mask RLE covers {} of {len} pixels", mask.len())));
    }
    Ok(mask)
}

impl DepthImage {
    /// Write `<path>` as a little-endian PFM and `<path>.json` with the
    /// intrinsics, pose and mask.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        // PFM stores rows bottom to top
        for v in (0..self.height).rev() {
            for u in 0..self.width {
                buf.extend_from_slice(&(self.depth[v * self.width + u] as f32).to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let meta = DepthMeta {
            width: self.width,
            height: self.height,
            intrinsics: self.intrinsics,
            camera_from_canonical: self.camera_from_canonical,
            mask_rle: mask_to_rle(&self.mask),
        };
        let side = crate::fields::sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = crate::fields::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DepthMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rd = std::io::BufReader::new(file);
        let mut line = String::new();
        let mut header = Vec::new();
        while header.len() < 3 {
            line.clear();
            if rd.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::Format("truncated PFM header".into()));
            }
            header.push(line.trim().to_string());
        }
        let bad = || Error::Format(format!("{}: malformed PFM header", path.display()));
        if header[0] != "Pf" {
            return Err(bad());
        }
        let dims: Vec<usize> = header[1]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let scale: f64 = header[2].parse().map_err(|_| bad())?;
        if dims != [meta.width, meta.height] || scale >= 0.0 {
            return Err(Error::Format(format!(
                "{}: PFM must be little-endian {}x{}",
                path.display(),
                meta.width,
                meta.height
            )));
        }
        let mut raw = vec![0u8; meta.width * meta.height * 4];
        rd.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let mut depth = vec![0.0; meta.width * meta.height];
        for (k, c) in raw.chunks_exact(4).enumerate() {
            let (row, u) = (k / meta.width, k % meta.width);
            let v = meta.height - 1 - row;
            depth[v * meta.width + u] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        let img = DepthImage {
            width: meta.width,
            height: meta.height,
            mask: rle_to_mask(&meta.mask_rle, depth.len())?,
            depth,
            intrinsics: meta.intrinsics,
            camera_from_canonical: meta.camera_from_canonical,
        };
        img.validate()?;
        Ok(img)
    }
}

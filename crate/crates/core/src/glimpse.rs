//! Glimpse extraction: one 64×64 patch per pyramid level, all centered on
//! the same focal point.
//!
//! Patch pixel `(r, c)` sits at glimpse coordinate `u = (c − 31.5, r − 31.5)`
//! and is read from level `i` (1-based) at
//! `focal / 2^(i−1) + s·R(θ)·u` by bilinear interpolation. Level pixel
//! centers are at integer + 0.5; taps outside the level read as zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::pyramid::{GaussianPyramid, GrayImage};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// Rotation and scale applied to the sampling grid about the focal point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlimpseTransform {
    /// Radians; positive rotates +x toward +y.
    pub rotation: f64,
    pub scale: f64,
}

impl Default for GlimpseTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl GlimpseTransform {
    pub const IDENTITY: GlimpseTransform = GlimpseTransform {
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn new(rotation: f64, scale: f64) -> Self {
        assert!(scale > 0.0, "glimpse scale must be positive");
        GlimpseTransform { rotation, scale }
    }

    /// Row-major `s·R(θ)`.
    pub fn matrix(&self) -> [f64; 4] {
        let (sin, cos) = self.rotation.sin_cos();
        let s = self.scale;
        [s * cos, -s * sin, s * sin, s * cos]
    }

    pub fn apply(&self, d: Point) -> Point {
        let m = self.matrix();
        Point::new(m[0] * d.x + m[1] * d.y, m[2] * d.x + m[3] * d.y)
    }

    pub fn apply_inverse(&self, d: Point) -> Point {
        let (sin, cos) = self.rotation.sin_cos();
        let k = 1.0 / self.scale;
        Point::new(k * (cos * d.x + sin * d.y), k * (-sin * d.x + cos * d.y))
    }
}

/// Bounds for training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            max_rotation_deg: 15.0,
            max_scale_delta: 0.05,
        }
    }
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        max_rotation_deg: 0.0,
        max_scale_delta: 0.0,
    };
}

/// θ uniform in ±max rotation, s uniform in 1 ± max scale delta.
pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, bounds: Augmentation) -> GlimpseTransform {
    let max_rot = bounds.max_rotation_deg.to_radians();
    let rotation = if max_rot > 0.0 {
        rng.random_range(-max_rot..=max_rot)
    } else {
        0.0
    };
    let scale = if bounds.max_scale_delta > 0.0 {
        rng.random_range(1.0 - bounds.max_scale_delta..=1.0 + bounds.max_scale_delta)
    } else {
        1.0
    };
    GlimpseTransform::new(rotation, scale)
}

/// Maps an offset predicted in the (possibly augmented) glimpse frame back
/// to the image frame: `s·R(θ)·offset`.
pub fn map_offset_to_image(transform: &GlimpseTransform, offset: Point) -> Point {
    transform.apply(offset)
}

/// Inverse of [`map_offset_to_image`].
pub fn map_offset_to_glimpse(transform: &GlimpseTransform, offset: Point) -> Point {
    transform.apply_inverse(offset)
}

#[inline]
fn sample_bilinear(level: &GrayImage, px: f64, py: f64, tap: &mut impl FnMut(usize, usize)) -> f32 {
    let (w, h) = (level.width() as isize, level.height() as isize);
    let qx = px - 0.5;
    let qy = py - 0.5;
    let x0 = qx.floor();
    let y0 = qy.floor();
    let fx = (qx - x0) as f32;
    let fy = (qy - y0) as f32;
    let (x0, y0) = (x0 as isize, y0 as isize);
    if x0 + 1 < 0 || y0 + 1 < 0 || x0 >= w || y0 >= h {
        return 0.0;
    }
    let pix = level.pixels();
    let mut acc = 0.0f32;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let y = y0 + dy;
        if y < 0 || y >= h || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = x0 + dx;
            if x < 0 || x >= w || wx == 0.0 {
                continue;
            }
            tap(x as usize, y as usize);
            acc += wy * wx * pix[y as usize * level.width() + x as usize];
        }
    }
    acc
}

fn sample_into(
    level: &GrayImage,
    level_index: usize,
    focal: Point,
    transform: &GlimpseTransform,
    out: &mut [f32],
    mut tap: impl FnMut(usize, usize),
) {
    assert!(level_index >= 1, "levels are 1-based");
    assert_eq!(out.len(), PATCH_PIXELS);
    let factor = (1u64 << (level_index - 1)) as f64;
    let cx = focal.x / factor;
    let cy = focal.y / factor;
    let m = transform.matrix();
    let half = PATCH_SIZE as f64 / 2.0 - 0.5;
    for r in 0..PATCH_SIZE {
        let v = r as f64 - half;
        for c in 0..PATCH_SIZE {
            let u = c as f64 - half;
            let px = cx + m[0] * u + m[1] * v;
            let py = cy + m[2] * u + m[3] * v;
            out[r * PATCH_SIZE + c] = sample_bilinear(level, px, py, &mut tap);
        }
    }
}

/// Samples one 64×64 patch from pyramid level `level_index` (1-based).
pub fn sample_patch(
    level: &GrayImage,
    level_index: usize,
    focal: Point,
    transform: &GlimpseTransform,
) -> Vec<f32> {
    let mut out = vec![0.0; PATCH_PIXELS];
    sample_into(level, level_index, focal, transform, &mut out, |_, _| {});
    out
}

/// Like [`sample_patch`] but reports every source pixel read.
pub fn sample_patch_traced(
    level: &GrayImage,
    level_index: usize,
    focal: Point,
    transform: &GlimpseTransform,
    tap: impl FnMut(usize, usize),
) -> Vec<f32> {
    let mut out = vec![0.0; PATCH_PIXELS];
    sample_into(level, level_index, focal, transform, &mut out, tap);
    out
}

/// N stacked patches, patch `i` taken from pyramid level `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Glimpse {
    patches: Vec<f32>,
    levels: usize,
    pub focal: Point,
    pub transform: GlimpseTransform,
}

impl Glimpse {
    pub fn num_levels(&self) -> usize {
        self.levels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * PATCH_PIXELS..(i + 1) * PATCH_PIXELS]
    }

    /// All samples, level-major; `N·64·64` values.
    pub fn data(&self) -> &[f32] {
        &self.patches
    }

    pub fn sample_count(&self) -> usize {
        self.patches.len()
    }
}

pub fn extract_glimpse(
    pyramid: &GaussianPyramid,
    focal: Point,
    transform: GlimpseTransform,
) -> Glimpse {
    let levels = pyramid.num_levels();
    let mut patches = vec![0.0; levels * PATCH_PIXELS];
    for (i, chunk) in patches.chunks_mut(PATCH_PIXELS).enumerate() {
        sample_into(pyramid.level(i), i + 1, focal, &transform, chunk, |_, _| {});
    }
    Glimpse {
        patches,
        levels,
        focal,
        transform,
    }
}

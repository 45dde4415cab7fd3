//! Grayscale images and Gaussian pyramids.

use thiserror::Error;

use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("pixel {index} is not finite")]
    NonFinite { index: usize },
    #[error("cannot downsample a 1x1 image")]
    TooSmall,
    #[error("{requested} levels requested but a {width}x{height} image supports at most {max}")]
    TooManyLevels {
        requested: usize,
        max: usize,
        width: usize,
        height: usize,
    },
    #[error("a pyramid needs at least one level")]
    NoLevels,
    #[error("could not allocate {bytes} bytes for pyramid storage")]
    Alloc { bytes: usize },
}

/// Row-major grayscale image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, PyramidError> {
        if width == 0 || height == 0 {
            return Err(PyramidError::EmptyImage { width, height });
        }
        if pixels.len() != width * height {
            return Err(PyramidError::BufferSize {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(index) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(PyramidError::NonFinite { index });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        GrayImage::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f32,
    ) -> Result<Self, PyramidError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Number of pyramid levels so the top level is roughly one patch wide:
/// `max(1, round(log2(max(w, h) / patch)) + 1)`.
pub fn num_levels(width: usize, height: usize, patch_size: usize) -> usize {
    let side = width.max(height).max(1) as f64;
    let n = (side / patch_size as f64).log2().round() as i64 + 1;
    n.max(1) as usize
}

/// Maximum levels reachable by ceil-halving before the image is 1×1.
pub fn max_levels(width: usize, height: usize) -> usize {
    let (mut w, mut h, mut n) = (width, height, 1);
    while w > 1 || h > 1 {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        n += 1;
    }
    n
}

const BINOMIAL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 5-tap binomial blur with clamped borders, keeping even samples.
pub fn downsample(image: &GrayImage) -> Result<GrayImage, PyramidError> {
    let (w, h) = (image.width, image.height);
    if w < 2 && h < 2 {
        return Err(PyramidError::TooSmall);
    }
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let src = &image.pixels;

    // horizontal pass, evaluated only at even columns
    let mut horiz = vec![0.0f32; ow * h];
    par::for_each_chunk_mut(&mut horiz, ow, |y, row| {
        let line = &src[y * w..(y + 1) * w];
        for (ox, out) in row.iter_mut().enumerate() {
            let cx = (2 * ox) as isize;
            *out = BINOMIAL
                .iter()
                .enumerate()
                .map(|(t, k)| k * line[clamp_index(cx + t as isize - 2, w)])
                .sum();
        }
    });

    let mut pixels = vec![0.0f32; ow * oh];
    par::for_each_chunk_mut(&mut pixels, ow, |oy, row| {
        let cy = (2 * oy) as isize;
        for (t, k) in BINOMIAL.iter().enumerate() {
            let sy = clamp_index(cy + t as isize - 2, h);
            let line = &horiz[sy * ow..(sy + 1) * ow];
            for (o, &v) in row.iter_mut().zip(line) {
                *o += k * v;
            }
        }
    });
    Ok(GrayImage {
        width: ow,
        height: oh,
        pixels,
    })
}

/// `levels[0]` is the source image; each further level is a downsampled copy
/// of the previous one.
#[derive(Clone, Debug)]
pub struct GaussianPyramid {
    levels: Vec<GrayImage>,
}

impl GaussianPyramid {
    pub fn build(image: GrayImage, levels: usize) -> Result<Self, PyramidError> {
        if levels == 0 {
            return Err(PyramidError::NoLevels);
        }
        let max = max_levels(image.width, image.height);
        if levels > max {
            return Err(PyramidError::TooManyLevels {
                requested: levels,
                max,
                width: image.width,
                height: image.height,
            });
        }
        let mut out = Vec::new();
        out.try_reserve_exact(levels)
            .map_err(|_| PyramidError::Alloc {
                bytes: levels * std::mem::size_of::<GrayImage>(),
            })?;
        out.push(image);
        for _ in 1..levels {
            let next = downsample(out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(GaussianPyramid { levels: out })
    }

    /// Builds with the level count chosen by [`num_levels`] for 64-pixel patches.
    pub fn build_auto(image: GrayImage) -> Result<Self, PyramidError> {
        let n = num_levels(image.width, image.height, crate::glimpse::PATCH_SIZE);
        GaussianPyramid::build(image, n)
    }

    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &GrayImage {
        &self.levels[i]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn source(&self) -> &GrayImage {
        &self.levels[0]
    }

    pub fn total_pixels(&self) -> usize {
        self.levels.iter().map(|l| l.width * l.height).sum()
    }

    pub fn resident_bytes(&self) -> usize {
        self.total_pixels() * std::mem::size_of::<f32>()
    }
}

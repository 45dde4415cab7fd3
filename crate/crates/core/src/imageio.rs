//! PNG/BMP ingestion into [`GrayImage`] and 8-bit PNG output.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use thiserror::Error;

use crate::pyramid::{GrayImage, PyramidError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: String,
        #[source]
        source: PyramidError,
    },
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn to_gray(img: &DynamicImage) -> Result<GrayImage, PyramidError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| luminance(p.0[0], p.0[1], p.0[2]))
            .collect(),
    };
    GrayImage::new(w, h, pixels)
}

pub fn load_gray(path: &Path) -> Result<GrayImage, ImageIoError> {
    let name = path.display().to_string();
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: name.clone(),
        source,
    })?;
    to_gray(&img).map_err(|source| ImageIoError::Invalid { path: name, source })
}

/// Header-only dimension probe.
pub fn dimensions(path: &Path) -> Result<(usize, usize), ImageIoError> {
    image::image_dimensions(path)
        .map(|(w, h)| (w as usize, h as usize))
        .map_err(|source| ImageIoError::Decode {
            path: path.display().to_string(),
            source,
        })
}

/// Writes an 8-bit grayscale image; values are clamped to `[0, 1]`.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), ImageIoError> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path).map_err(|source| ImageIoError::Decode {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(5, 3, |x, y| (x + 5 * y) as f32 / 14.0).unwrap();
        let p = dir.path().join("a.png");
        save_gray(&img, &p).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(dimensions(&p).unwrap(), (5, 3));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn color_uses_luminance_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = RgbImage::new(1, 1);
        rgb.put_pixel(0, 0, Rgb([255, 0, 0]));
        let p = dir.path().join("c.bmp");
        rgb.save(&p).unwrap();
        let g = load_gray(&p).unwrap();
        assert!((g.get(0, 0) - 0.299).abs() < 1e-5);
    }

    #[test]
    fn unreadable_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(load_gray(&p).is_err());
    }
}

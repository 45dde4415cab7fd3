//! Per-iteration cost versus image side length.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::glimpse::{extract_glimpse, GlimpseTransform, PATCH_PIXELS};
use crate::model::{Model, Preset};
use crate::pyramid::{num_levels, GaussianPyramid, GrayImage, PyramidError};
use crate::trainer::refine_once;

pub const DEFAULT_SIDES: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sides: Vec<usize>,
    /// `refine_once` calls timed per side.
    pub iterations: usize,
    /// The calls are split into this many rounds, interleaved across sides.
    pub rounds: usize,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sides: DEFAULT_SIDES.to_vec(),
            iterations: 100,
            rounds: 5,
            preset: Preset::Tiny,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SideResult {
    pub side: usize,
    pub levels: usize,
    pub glimpse_pixels: usize,
    /// Median over rounds of the mean time per `refine_once`.
    pub iteration_s: f64,
    pub pyramid_build_s: f64,
    pub pyramid_bytes: usize,
    /// Pyramid plus one glimpse buffer.
    pub resident_bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingReport {
    pub results: Vec<SideResult>,
    /// `(side, message)` for sides that could not be run.
    pub failures: Vec<(usize, String)>,
    /// `iteration_s ≈ intercept + slope·log2(side)`.
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

impl ScalingReport {
    pub fn get(&self, side: usize) -> Option<&SideResult> {
        self.results.iter().find(|r| r.side == side)
    }

    pub fn ratio(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.get(a)?.iteration_s / self.get(b)?.iteration_s)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>6} {:>3} {:>8} {:>12} {:>12} {:>12}\n",
            "side", "N", "pixels", "iter (ms)", "pyramid (ms)", "resident MB"
        );
        for r in &self.results {
            s += &format!(
                "{:>6} {:>3} {:>8} {:>12.3} {:>12.1} {:>12.1}\n",
                r.side,
                r.levels,
                r.glimpse_pixels,
                r.iteration_s * 1e3,
                r.pyramid_build_s * 1e3,
                r.resident_bytes as f64 / 1048576.0
            );
        }
        for (side, msg) in &self.failures {
            s += &format!("{side:>6} failed: {msg}\n");
        }
        s += &format!(
            "fit: t = {:.4} ms + {:.4} ms·log2(side), R² = {:.4}\n",
            self.intercept * 1e3,
            self.slope * 1e3,
            self.r_squared
        );
        s
    }
}

/// Least-squares line through `(x, y)`; returns `(intercept, slope, R²)`.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (points.first().map_or(0.0, |p| p.1), 0.0, 1.0);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    (intercept, slope, r2)
}

struct Prepared {
    side: usize,
    pyramid: GaussianPyramid,
    model: Model,
    build_s: f64,
    times: Vec<f64>,
}

fn constant_image(side: usize) -> Result<GrayImage, PyramidError> {
    let n = side
        .checked_mul(side)
        .ok_or(PyramidError::Alloc { bytes: usize::MAX })?;
    let mut px = Vec::new();
    px.try_reserve_exact(n)
        .map_err(|_| PyramidError::Alloc { bytes: n * 4 })?;
    px.resize(n, 0.5f32);
    GrayImage::new(side, side, px)
}

/// Builds a constant image per side, then times `refine_once` with random
/// parameters. Pyramid construction is timed separately.
pub fn run_scaling(config: &BenchConfig) -> ScalingReport {
    let mut prepared = Vec::new();
    let mut failures = Vec::new();
    for &side in &config.sides {
        let t0 = Instant::now();
        let built = constant_image(side).and_then(GaussianPyramid::build_auto);
        match built {
            Ok(pyramid) => {
                let build_s = t0.elapsed().as_secs_f64();
                let model = Model::new(config.preset, pyramid.num_levels(), config.seed);
                prepared.push(Prepared {
                    side,
                    pyramid,
                    model,
                    build_s,
                    times: Vec::new(),
                });
            }
            Err(e) => {
                log::warn!("bench side {side}: {e}");
                failures.push((side, e.to_string()));
            }
        }
    }
    let rounds = config.rounds.max(1);
    let per_round = config.iterations.div_ceil(rounds).max(1);
    for round in 0..rounds {
        for p in &mut prepared {
            let c = p.side as f64 / 2.0;
            let t0 = Instant::now();
            for i in 0..per_round {
                let jitter = ((round * per_round + i) % 7) as f64;
                let focal = Point::new(c + jitter, c - jitter);
                let r = refine_once(&p.model, &p.pyramid, focal, GlimpseTransform::IDENTITY);
                std::hint::black_box(r.expect("refine on a valid pyramid"));
            }
            p.times.push(t0.elapsed().as_secs_f64() / per_round as f64);
        }
    }
    let results: Vec<SideResult> = prepared
        .into_iter()
        .map(|mut p| {
            p.times.sort_by(f64::total_cmp);
            let median = p.times[p.times.len() / 2];
            let glimpse =
                extract_glimpse(&p.pyramid, Point::new(0.0, 0.0), GlimpseTransform::IDENTITY);
            let levels = p.pyramid.num_levels();
            debug_assert_eq!(levels, num_levels(p.side, p.side, 64));
            SideResult {
                side: p.side,
                levels,
                glimpse_pixels: glimpse.sample_count(),
                iteration_s: median,
                pyramid_build_s: p.build_s,
                pyramid_bytes: p.pyramid.resident_bytes(),
                resident_bytes: p.pyramid.resident_bytes() + levels * PATCH_PIXELS * 4,
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = results
        .iter()
        .map(|r| ((r.side as f64).log2(), r.iteration_s))
        .collect();
    let (intercept, slope, r_squared) = fit_line(&pts);
    ScalingReport {
        results,
        failures,
        intercept,
        slope,
        r_squared,
    }
}

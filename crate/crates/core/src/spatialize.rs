//! Spatialized features: each activation channel treated as a heatmap and
//! reduced to `(f_x, f_y, f_a)` — expected normalized position and expected
//! raw activation under the channel's own softmax.
//!
//! For a `W`-wide grid, column `x ∈ 1..=W` maps to `(x − (W+1)/2) / (W/2)`,
//! i.e. `(x − 4.5)/4` for the 8×8 maps the CNN presets produce.

use std::io::Write;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SpatializeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("level {level} has {got} channels, expected {expected}")]
    ChannelMismatch {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error("no feature levels given")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `C` rows of `(f_x, f_y, f_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatializedFeatures {
    channels: usize,
    values: Vec<f32>,
}

impl SpatializedFeatures {
    pub fn from_rows(rows: &[[f32; 3]]) -> Self {
        SpatializedFeatures {
            channels: rows.len(),
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, k: usize) -> [f32; 3] {
        [
            self.values[3 * k],
            self.values[3 * k + 1],
            self.values[3 * k + 2],
        ]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// Spatializes a `[C,H,W]` activation volume.
pub fn spatialize(volume: &Tensor<f32>) -> Result<SpatializedFeatures, SpatializeError> {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(volume.clone());
    let f = tape.spatialize(a)?;
    let out = tape.value(f);
    Ok(SpatializedFeatures {
        channels: out.shape()[out.rank() - 2],
        values: out.data().to_vec(),
    })
}

/// Per-channel softmax heatmaps `p_k` of a `[C,H,W]` volume.
pub fn heatmaps(volume: &Tensor<f32>) -> Result<Tensor<f32>, SpatializeError> {
    let shape = volume.shape();
    if shape.len() != 3 {
        return Err(
            TensorError::shape("heatmaps", format!("expected [C,H,W], got {:?}", shape)).into(),
        );
    }
    let plane = shape[1] * shape[2];
    let probs: Vec<f32> = volume
        .data()
        .chunks(plane)
        .flat_map(crate::tensor::softmax_plane)
        .collect();
    Ok(Tensor::new(shape.to_vec(), probs)?)
}

/// Level-major, channel-major concatenation with `(f_x, f_y, f_a)` innermost.
pub fn flatten_and_concat(levels: &[SpatializedFeatures]) -> Result<Vec<f32>, SpatializeError> {
    let first = levels.first().ok_or(SpatializeError::Empty)?;
    let mut out = Vec::with_capacity(levels.len() * first.channels * 3);
    for (i, l) in levels.iter().enumerate() {
        if l.channels != first.channels {
            return Err(SpatializeError::ChannelMismatch {
                level: i,
                expected: first.channels,
                got: l.channels,
            });
        }
        out.extend_from_slice(&l.values);
    }
    Ok(out)
}

/// Writes `channel,x,y,activation,probability` rows (1-based grid positions)
/// for external contour plotting.
pub fn write_heatmap_csv<W: Write>(out: W, volume: &Tensor<f32>) -> Result<(), SpatializeError> {
    let probs = heatmaps(volume)?;
    let (h, w) = (volume.shape()[1], volume.shape()[2]);
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["channel", "x", "y", "activation", "probability"])?;
    for (i, (a, p)) in volume.data().iter().zip(probs.data()).enumerate() {
        let k = i / (h * w);
        let y = (i / w) % h + 1;
        let x = i % w + 1;
        wr.write_record([
            k.to_string(),
            x.to_string(),
            y.to_string(),
            a.to_string(),
            p.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes `level,channel,f_x,f_y,f_a` rows.
pub fn write_features_csv<W: Write>(
    out: W,
    levels: &[SpatializedFeatures],
) -> Result<(), SpatializeError> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["level", "channel", "f_x", "f_y", "f_a"])?;
    for (li, l) in levels.iter().enumerate() {
        for k in 0..l.channels {
            let [fx, fy, fa] = l.row(k);
            wr.write_record([
                (li + 1).to_string(),
                k.to_string(),
                fx.to_string(),
                fy.to_string(),
                fa.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

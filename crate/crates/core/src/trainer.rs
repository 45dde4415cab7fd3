//! Iterative error-feedback training and inference for one landmark.
//!
//! Every refinement iteration records a fresh tape: the current estimate
//! enters as a constant, so no gradient flows between iterations, and each
//! iteration of each batch ends in its own Adam update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::Point;
use crate::glimpse::{
    extract_glimpse, random_transform, Augmentation, GlimpseTransform, PATCH_SIZE,
};
use crate::model::{Model, ModelError, Preset};
use crate::par;
use crate::pyramid::GaussianPyramid;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training labels")]
    NoLabels,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("pyramid has {got} levels but the model expects {expected}")]
    Levels { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}, iteration {iteration}\n{dump}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        iteration: usize,
        dump: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("observer: {0}")]
    Observer(String),
}

/// Mean and population standard deviation of the training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkStats {
    pub mean: Point,
    pub std: Point,
}

pub fn compute_label_stats(labels: &[Point]) -> Result<LandmarkStats, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let n = labels.len() as f64;
    let mx = labels.iter().map(|p| p.x).sum::<f64>() / n;
    let my = labels.iter().map(|p| p.y).sum::<f64>() / n;
    let vx = labels.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / n;
    let vy = labels.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / n;
    Ok(LandmarkStats {
        mean: Point::new(mx, my),
        std: Point::new(vx.sqrt(), vy.sqrt()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateMode {
    Training,
    Inference,
}

/// Training draws from `N(μ, diag(σ²))`; inference starts exactly at `μ`.
pub fn init_estimate<R: Rng + ?Sized>(
    mode: EstimateMode,
    stats: &LandmarkStats,
    rng: &mut R,
) -> Point {
    match mode {
        EstimateMode::Inference => stats.mean,
        EstimateMode::Training => {
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            Point::new(
                stats.mean.x + stats.std.x * zx,
                stats.mean.y + stats.std.y * zy,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Epochs at the first and second learning rate.
    pub epochs: (usize, usize),
    pub learning_rates: (f64, f64),
    pub batch_size: usize,
    pub t_train: usize,
    pub t_infer: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub landmark: usize,
    pub adam: AdamConfig,
    /// Checkpoint interval in epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Tiny,
            epochs: (20, 20),
            learning_rates: (1e-4, 1e-5),
            batch_size: 2,
            t_train: 10,
            t_infer: 10,
            augmentation: Augmentation::default(),
            seed: 0,
            landmark: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.t_train == 0 || self.t_infer == 0 {
            return bad("iteration counts must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rates.0 > 0.0 && self.learning_rates.1 > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.0 + self.epochs.1
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs.0 {
            self.learning_rates.0
        } else {
            self.learning_rates.1
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_radial_error_px: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

pub fn write_log_csv<W: std::io::Write>(out: W, rows: &[EpochLog]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// After every optimizer update.
    fn on_step(&mut self, _epoch: usize, _batch: usize, _iteration: usize, _loss: f64) {}

    fn on_epoch(&mut self, _row: &EpochLog, _model: &Model) -> Result<(), String> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Observer that counts optimizer updates per batch.
#[derive(Debug, Default)]
pub struct StepCounter {
    pub total: usize,
    pub per_batch: Vec<usize>,
    last: Option<(usize, usize)>,
}

impl TrainObserver for StepCounter {
    fn on_step(&mut self, epoch: usize, batch: usize, _iteration: usize, _loss: f64) {
        self.total += 1;
        if self.last != Some((epoch, batch)) {
            self.per_batch.push(0);
            self.last = Some((epoch, batch));
        }
        *self.per_batch.last_mut().expect("pushed") += 1;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Per-iteration result of a batched forward/backward pass.
pub struct BatchIteration {
    /// Batch-mean ℓ1 loss.
    pub loss: f64,
    /// Image-frame offsets `x̄`, one per image.
    pub offsets: Vec<Point>,
    /// Gradients for every model parameter, in declaration order.
    pub grads: Vec<Tensor<f32>>,
}

fn stack_patches(
    model: &Model,
    pyramids: &[&GaussianPyramid],
    estimates: &[Point],
    transforms: &[GlimpseTransform],
) -> Result<Tensor<f32>, TrainError> {
    let levels = model.levels();
    let per = PATCH_SIZE * PATCH_SIZE;
    let mut data = vec![0.0f32; pyramids.len() * levels * per];
    for p in pyramids {
        if p.num_levels() != levels {
            return Err(TrainError::Levels {
                expected: levels,
                got: p.num_levels(),
            });
        }
    }
    par::for_each_chunk_mut(&mut data, levels * per, |b, chunk| {
        let g = extract_glimpse(pyramids[b], estimates[b], transforms[b]);
        chunk.copy_from_slice(g.data());
    });
    Ok(Tensor::new(
        vec![pyramids.len() * levels, 1, PATCH_SIZE, PATCH_SIZE],
        data,
    )?)
}

fn transform_mats(transforms: &[GlimpseTransform]) -> Vec<[f32; 4]> {
    transforms
        .iter()
        .map(|t| t.matrix().map(|v| v as f32))
        .collect()
}

/// Image-frame offsets for a batch of glimpses, without recording gradients.
pub fn predict_offsets(
    model: &Model,
    pyramids: &[&GaussianPyramid],
    estimates: &[Point],
    transforms: &[GlimpseTransform],
) -> Result<Vec<Point>, TrainError> {
    let patches = stack_patches(model, pyramids, estimates, transforms)?;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(patches);
    let y = model.forward_glimpses(&mut tape, &vars, x, pyramids.len())?;
    let y = tape.row_transform(y, transform_mats(transforms))?;
    Ok(tape
        .value(y)
        .data()
        .chunks(2)
        .map(|r| Point::new(r[0] as f64, r[1] as f64))
        .collect())
}

/// Forward and backward pass of one refinement iteration for a batch.
///
/// The loss is `(1/B) Σ_b ‖x_b − (x̂_b + x̄_b)‖₁`, with `x̂_b` a constant.
pub fn batch_iteration(
    model: &Model,
    pyramids: &[&GaussianPyramid],
    targets: &[Point],
    estimates: &[Point],
    transforms: &[GlimpseTransform],
) -> Result<BatchIteration, TrainError> {
    let b = pyramids.len();
    let patches = stack_patches(model, pyramids, estimates, transforms)?;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(patches);
    let y = model.forward_glimpses(&mut tape, &vars, x, b)?;
    let y = tape.row_transform(y, transform_mats(transforms))?;
    let residual: Vec<f32> = targets
        .iter()
        .zip(estimates)
        .flat_map(|(t, e)| [(t.x - e.x) as f32, (t.y - e.y) as f32])
        .collect();
    let target = tape.constant(Tensor::new(vec![b, 2], residual)?);
    let l1 = tape.l1_loss(y, target)?;
    let loss = tape.scale(l1, 1.0 / b as f32);
    let grads = tape.backward(loss)?;
    let offsets = tape
        .value(y)
        .data()
        .chunks(2)
        .map(|r| Point::new(r[0] as f64, r[1] as f64))
        .collect();
    Ok(BatchIteration {
        loss: tape.value(loss).data()[0] as f64,
        offsets,
        grads: vars.iter().map(|&v| grads.get_or_zeros(v)).collect(),
    })
}

/// One refinement step: returns the image-frame offset `x̄` and `x̂ + x̄`.
pub fn refine_once(
    model: &Model,
    pyramid: &GaussianPyramid,
    estimate: Point,
    transform: GlimpseTransform,
) -> Result<(Point, Point), TrainError> {
    let off = predict_offsets(model, &[pyramid], &[estimate], &[transform])?[0];
    Ok((off, estimate + off))
}

/// Estimates after each of `t_infer` identity-transform iterations started
/// at `μ`; element 0 is `μ` itself.
pub fn infer_trajectory(
    model: &Model,
    pyramid: &GaussianPyramid,
    stats: &LandmarkStats,
    t_infer: usize,
) -> Result<Vec<Point>, TrainError> {
    let mut x = stats.mean;
    let mut out = vec![x];
    for _ in 0..t_infer {
        x = refine_once(model, pyramid, x, GlimpseTransform::IDENTITY)?.1;
        out.push(x);
    }
    Ok(out)
}

pub fn infer(
    model: &Model,
    pyramid: &GaussianPyramid,
    stats: &LandmarkStats,
    t_infer: usize,
) -> Result<Point, TrainError> {
    Ok(*infer_trajectory(model, pyramid, stats, t_infer)?
        .last()
        .expect("non-empty"))
}

/// Trajectories for many images, evaluated in batches of up to 16 glimpses.
pub fn infer_batch(
    model: &Model,
    pyramids: &[&GaussianPyramid],
    stats: &LandmarkStats,
    t_infer: usize,
) -> Result<Vec<Vec<Point>>, TrainError> {
    let mut out = Vec::with_capacity(pyramids.len());
    for chunk in pyramids.chunks(16) {
        let mut x = vec![stats.mean; chunk.len()];
        let mut traj: Vec<Vec<Point>> = x.iter().map(|&p| vec![p]).collect();
        let ident = vec![GlimpseTransform::IDENTITY; chunk.len()];
        for _ in 0..t_infer {
            let off = predict_offsets(model, chunk, &x, &ident)?;
            for ((xi, o), t) in x.iter_mut().zip(off).zip(traj.iter_mut()) {
                *xi = *xi + o;
                t.push(*xi);
            }
        }
        out.extend(traj);
    }
    Ok(out)
}

fn state_dump(
    model: &Model,
    estimates: &[Point],
    targets: &[Point],
    transforms: &[GlimpseTransform],
) -> String {
    let mut s = String::new();
    for (i, ((e, t), tr)) in estimates.iter().zip(targets).zip(transforms).enumerate() {
        s += &format!(
            "  image {i}: estimate ({:.3}, {:.3}) target ({:.3}, {:.3}) rotation {:.4} scale {:.4}\n",
            e.x, e.y, t.x, t.y, tr.rotation, tr.scale
        );
    }
    for p in &model.params.params {
        let norm = p
            .value
            .data()
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        s += &format!(
            "  {}: l2 {:.4e} finite {}\n",
            p.name,
            norm,
            p.value.is_finite()
        );
    }
    s
}

/// Trains a fresh model on `pyramids` with ground truth `labels`.
pub fn train(
    pyramids: &[GaussianPyramid],
    labels: &[Point],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if pyramids.len() != labels.len() {
        return Err(TrainError::LabelCount {
            images: pyramids.len(),
            labels: labels.len(),
        });
    }
    let stats = compute_label_stats(labels)?;
    let levels = pyramids[0].num_levels();
    let mut model = Model::new(config.preset, levels, config.seed);
    model.params.meta.landmark = config.landmark;
    model.params.meta.stats = Some(stats);
    model.params.meta.config_hash = Some(config.hash());
    train_model(model, pyramids, labels, config, observer)
}

/// Continues training an existing model.
pub fn train_model(
    mut model: Model,
    pyramids: &[GaussianPyramid],
    labels: &[Point],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let stats = model
        .params
        .meta
        .stats
        .map_or_else(|| compute_label_stats(labels), Ok)?;
    let mut params = model.tensors();
    let mut adam = AdamState::new(&params, config.adam);
    let n = pyramids.len();
    let mut log = Vec::new();
    let start = Instant::now();
    for epoch in 0..config.total_epochs() {
        let lr = config.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let (mut err_sum, mut err_count) = (0.0, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let pyr: Vec<&GaussianPyramid> = batch.iter().map(|&i| &pyramids[i]).collect();
            let targets: Vec<Point> = batch.iter().map(|&i| labels[i]).collect();
            let mut estimates: Vec<Point> = batch
                .iter()
                .map(|_| init_estimate(EstimateMode::Training, &stats, &mut rng))
                .collect();
            for it in 0..config.t_train {
                let transforms: Vec<GlimpseTransform> = batch
                    .iter()
                    .map(|_| random_transform(&mut rng, config.augmentation))
                    .collect();
                let step = batch_iteration(&model, &pyr, &targets, &estimates, &transforms)?;
                if !step.loss.is_finite() || step.grads.iter().any(|g| !g.is_finite()) {
                    let dump = state_dump(&model, &estimates, &targets, &transforms);
                    log::error!(
                        "non-finite loss at epoch {epoch} batch {bi} iteration {it}\n{dump}"
                    );
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        iteration: it,
                        dump,
                    });
                }
                adam_step(&mut params, &step.grads, &mut adam, lr as f32)?;
                model.set_tensors(params.clone());
                observer.on_step(epoch, bi, it, step.loss);
                loss_sum += step.loss;
                loss_count += 1;
                for (e, o) in estimates.iter_mut().zip(&step.offsets) {
                    *e = *e + *o;
                }
            }
            for (e, t) in estimates.iter().zip(&targets) {
                err_sum += e.dist(*t);
                err_count += 1;
            }
        }
        let row = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            mean_radial_error_px: err_sum / err_count.max(1) as f64,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.3} radial error {:.3} px lr {:e}",
            row.epoch,
            row.mean_loss,
            row.mean_radial_error_px,
            row.lr
        );
        observer
            .on_epoch(&row, &model)
            .map_err(TrainError::Observer)?;
        log.push(row);
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: adam.step_count(),
    })
}

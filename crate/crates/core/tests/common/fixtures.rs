//! Fabricated ISBI-layout corpora and training mechanics shared by the
//! dataset, trainer and acceptance targets.

use std::fs;
use std::path::Path;

use fvpy::dataset::{
    gen_synthetic, load_isbi, DatasetError, DatasetMeta, GtMode, SyntheticConfig, ISBI_LANDMARKS,
};
use fvpy::glimpse::{random_transform, GlimpseTransform};
use fvpy::imageio::save_gray;
use fvpy::metrics::{EvalReport, LandmarkReport};
use fvpy::model::{encode, Model, Preset};
use fvpy::pyramid::{GaussianPyramid, GrayImage};
use fvpy::tensor::{adam_step, AdamState, Tensor};
use fvpy::trainer::{
    batch_iteration, compute_label_stats, infer_batch, init_estimate, train, EstimateMode,
    StepCounter, TrainConfig,
};
use fvpy::Point;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PX_PER_MM: f64 = 10.0;

pub fn junior(image: usize, k: usize) -> Point {
    Point::new(101.0 + 10.0 * k as f64, 51.0 + 5.0 * image as f64)
}

/// Senior labels sit 6 px right and 8 px down of the junior ones: 1 mm apart.
pub fn senior(image: usize, k: usize) -> Point {
    junior(image, k) + Point::new(6.0, 8.0)
}

fn write_points(path: &Path, pts: &[Point]) {
    let text: String = pts.iter().map(|p| format!("{},{}\n", p.x, p.y)).collect();
    fs::write(path, text).unwrap();
}

/// Two 40×30 images with 19 landmarks each from two annotators.
pub fn write_isbi_fixture(root: &Path) {
    fs::create_dir_all(root.join("images")).unwrap();
    for who in ["junior", "senior"] {
        fs::create_dir_all(root.join("annotations").join(who)).unwrap();
    }
    for i in 0..2 {
        let id = format!("{:03}", i + 1);
        let img = GrayImage::from_fn(40, 30, |x, y| ((x + y + i) % 5) as f32 / 4.0).unwrap();
        save_gray(&img, &root.join("images").join(format!("{id}.png"))).unwrap();
        let j: Vec<Point> = (0..19).map(|k| junior(i, k)).collect();
        let s: Vec<Point> = (0..19).map(|k| senior(i, k)).collect();
        write_points(
            &root.join("annotations/junior").join(format!("{id}.txt")),
            &j,
        );
        write_points(
            &root.join("annotations/senior").join(format!("{id}.txt")),
            &s,
        );
    }
    let meta = DatasetMeta {
        px_per_mm: PX_PER_MM,
        dims: Some((40, 30)),
        landmark_names: ISBI_LANDMARKS.iter().map(|s| s.to_string()).collect(),
    };
    fs::write(
        root.join("metadata.json"),
        serde_json::to_string(&meta).unwrap(),
    )
    .unwrap();
}

/// Checks the loader and report generator against hand-computed values.
///
/// Predictions are the averaged truth plus (3,4) px on image 1 and (0,30) px
/// on image 2: radial errors 0.5 mm and 3.0 mm, so every landmark row reads
/// MRE 1.75 ± 1.25 mm, SDR 50/50/100/100 and IOV 0.5 ± 0 mm.
pub fn check_isbi_fixture(root: &Path) -> Result<String, String> {
    write_isbi_fixture(root);
    let ds = load_isbi(root, GtMode::Average).map_err(|e| e.to_string())?;
    check(ds.len() == 2, "two images")?;
    for (i, img) in ds.images.iter().enumerate() {
        for k in 0..19 {
            let expect = junior(i, k) + Point::new(3.0, 4.0);
            check(
                img.truth[k] == expect,
                &format!("averaged truth image {i} landmark {k}"),
            )?;
        }
    }
    let jr = load_isbi(root, GtMode::Junior).map_err(|e| e.to_string())?;
    check(jr.images[1].truth[4] == junior(1, 4), "junior mode")?;

    let offsets = [Point::new(3.0, 4.0), Point::new(0.0, 30.0)];
    let mut rows = Vec::new();
    let mut perfect = Vec::new();
    for (k, name) in ISBI_LANDMARKS.iter().enumerate() {
        let truth = ds.labels(k);
        let preds: Vec<Point> = truth.iter().zip(offsets).map(|(t, o)| *t + o).collect();
        let j: Vec<Point> = ds.images.iter().map(|im| im.junior[k]).collect();
        let s: Vec<Point> = ds.images.iter().map(|im| im.senior[k]).collect();
        let row = LandmarkReport::new(name, &preds, &truth, Some((&j, &s)), ds.meta.px_per_mm)
            .map_err(|e| e.to_string())?;
        check(
            row.mre_mm == 1.75 && row.std_mm == 1.25,
            &format!("{name} MRE {} ± {}", row.mre_mm, row.std_mm),
        )?;
        check(
            row.sdr == vec![50.0, 50.0, 100.0, 100.0],
            &format!("{name} SDR {:?}", row.sdr),
        )?;
        check(
            row.iov_mm == Some(0.5) && row.iov_std_mm == Some(0.0),
            &format!("{name} IOV {:?}", row.iov_mm),
        )?;
        rows.push(row);
        perfect.push(
            LandmarkReport::new(name, &truth, &truth, None, ds.meta.px_per_mm)
                .map_err(|e| e.to_string())?,
        );
    }
    let report = EvalReport::new("fixture", rows).map_err(|e| e.to_string())?;
    check(
        report.average.mre_mm == 1.75 && report.average.iov_mm == Some(0.5),
        "average row",
    )?;
    check(report.to_text().contains("1.75 ± 1.25"), "text table")?;
    let ideal = EvalReport::new("perfect", perfect).map_err(|e| e.to_string())?;
    check(
        ideal.average.mre_mm == 0.0 && ideal.average.sdr == vec![100.0; 4],
        "perfect predictions",
    )?;

    // a file with 18 landmarks is rejected by name
    let bad = root.join("annotations/senior/002.txt");
    let pts: Vec<Point> = (0..18).map(|k| senior(1, k)).collect();
    write_points(&bad, &pts);
    match load_isbi(root, GtMode::Average) {
        Err(DatasetError::LandmarkCount {
            file,
            expected: 19,
            found: 18,
        }) if file == bad => {}
        other => return Err(format!("18-line file gave {:?}", other.map(|d| d.len()))),
    }
    Ok("loader truth, MRE/SDR/IOV table and 18-line rejection match hand values".into())
}

pub fn check(ok: bool, what: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

pub struct SyntheticSet {
    pub pyramids: Vec<GaussianPyramid>,
    pub labels: Vec<Point>,
}

pub fn synthetic_set(side: usize, count: usize, seed: u64) -> SyntheticSet {
    let cfg = SyntheticConfig {
        side,
        count,
        seed,
        ..Default::default()
    };
    let imgs = gen_synthetic(&cfg).unwrap();
    SyntheticSet {
        labels: imgs.iter().map(|i| i.landmarks[0]).collect(),
        pyramids: imgs
            .into_iter()
            .map(|i| GaussianPyramid::build_auto(i.image).unwrap())
            .collect(),
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: (1, 0),
        learning_rates: (1e-3, 1e-4),
        seed,
        ..Default::default()
    }
}

/// Counts optimizer updates per batch during a real training run.
pub fn check_step_count() -> Result<String, String> {
    let set = synthetic_set(128, 4, 2);
    let mut counter = StepCounter::default();
    let out = train(&set.pyramids, &set.labels, &small_config(1), &mut counter)
        .map_err(|e| e.to_string())?;
    check(
        counter.per_batch == vec![10, 10],
        &format!("updates per batch {:?}", counter.per_batch),
    )?;
    check(
        counter.total == 20 && out.steps == 20,
        &format!("total {} adam {}", counter.total, out.steps),
    )?;
    Ok(format!(
        "updates per 2-image batch {:?}, Adam steps {}",
        counter.per_batch, out.steps
    ))
}

struct Replay {
    grads: Vec<Vec<Tensor<f32>>>,
    params: Vec<Tensor<f32>>,
}

/// Replays the first batch of the training loop by hand, one fresh tape per
/// iteration with the current estimate passed as a plain value. `shift`
/// moves the target of one iteration's loss.
fn replay(
    set: &SyntheticSet,
    config: &TrainConfig,
    shift: Option<usize>,
) -> Result<Replay, String> {
    let stats = compute_label_stats(&set.labels).map_err(|e| e.to_string())?;
    let mut model = Model::new(config.preset, set.pyramids[0].num_levels(), config.seed);
    let mut params = model.tensors();
    let mut adam = AdamState::new(&params, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..set.pyramids.len()).collect();
    order.shuffle(&mut rng);
    let order = &order[..config.batch_size];
    let pyr: Vec<&GaussianPyramid> = order.iter().map(|&i| &set.pyramids[i]).collect();
    let targets: Vec<Point> = order.iter().map(|&i| set.labels[i]).collect();
    let mut est: Vec<Point> = order
        .iter()
        .map(|_| init_estimate(EstimateMode::Training, &stats, &mut rng))
        .collect();
    let mut grads = Vec::new();
    for it in 0..config.t_train {
        let tr: Vec<GlimpseTransform> = order
            .iter()
            .map(|_| random_transform(&mut rng, config.augmentation))
            .collect();
        let mut tg = targets.clone();
        if shift == Some(it) {
            tg[0] = tg[0] + Point::new(17.0, -9.0);
        }
        let step = batch_iteration(&model, &pyr, &tg, &est, &tr).map_err(|e| e.to_string())?;
        adam_step(
            &mut params,
            &step.grads,
            &mut adam,
            config.lr_for_epoch(0) as f32,
        )
        .map_err(|e| e.to_string())?;
        model.set_tensors(params.clone());
        for (e, o) in est.iter_mut().zip(&step.offsets) {
            *e = *e + *o;
        }
        grads.push(step.grads);
    }
    Ok(Replay { grads, params })
}

fn bits_equal(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        x.data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

/// The trainer must match a per-iteration replay bit for bit, and perturbing
/// the loss of one iteration must leave the gradients of earlier iterations
/// untouched.
pub fn check_tape_isolation() -> Result<String, String> {
    let set = synthetic_set(128, 2, 5);
    let config = TrainConfig {
        t_train: 4,
        ..small_config(3)
    };
    let trained = train(&set.pyramids, &set.labels, &config, &mut ()).map_err(|e| e.to_string())?;
    let base = replay(&set, &config, None)?;
    check(
        bits_equal(&trained.model.tensors(), &base.params),
        "trainer parameters differ from the per-iteration replay",
    )?;
    let t = 2;
    let moved = replay(&set, &config, Some(t))?;
    for i in 0..t {
        check(
            bits_equal(&base.grads[i], &moved.grads[i]),
            &format!("iteration {i} changed when iteration {t}'s loss moved"),
        )?;
    }
    check(
        !bits_equal(&base.grads[t], &moved.grads[t]),
        "perturbation had no effect",
    )?;
    Ok(format!(
        "{} iterations replayed on fresh tapes, parameters bit-identical; moving iteration {t}'s loss left earlier gradients unchanged",
        config.t_train
    ))
}

/// Inference must not touch the parameters.
pub fn check_inference_is_read_only() -> Result<String, String> {
    let set = synthetic_set(128, 3, 6);
    let model = Model::new(Preset::Tiny, set.pyramids[0].num_levels(), 4);
    let before = encode(&model.params);
    let stats = compute_label_stats(&set.labels).map_err(|e| e.to_string())?;
    let refs: Vec<&GaussianPyramid> = set.pyramids.iter().collect();
    infer_batch(&model, &refs, &stats, 10).map_err(|e| e.to_string())?;
    check(
        encode(&model.params) == before,
        "parameters changed during inference",
    )?;
    Ok(format!(
        "{} bytes unchanged after 10 iterations on 3 images",
        before.len()
    ))
}

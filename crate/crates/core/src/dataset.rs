//! Landmark datasets on disk and synthetic multi-scale landmark images.
//!
//! Layout shared by the ISBI corpus and generated sets:
//!
//! ```text
//! root/images/001.bmp | 001.png
//! root/annotations/junior/001.txt   one "x,y" line per landmark
//! root/annotations/senior/001.txt
//! root/metadata.json                optional: px_per_mm, dims, landmark names
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point;
use crate::imageio::{self, ImageIoError};
use crate::par;
use crate::pyramid::GrayImage;

pub const ISBI_LANDMARKS: [&str; 19] = [
    "Sella",
    "Nasion",
    "Orbitale",
    "Porion",
    "Subspinale",
    "Supramentale",
    "Pogonion",
    "Menton",
    "Gnathion",
    "Gonion",
    "Incision inferius",
    "Incision superius",
    "Upper lip",
    "Lower lip",
    "Subnasale",
    "Soft tissue pogonion",
    "Posterior nasal spine",
    "Anterior nasal spine",
    "Articulare",
];

pub const ISBI_DIMS: (usize, usize) = (1935, 2400);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{file}: expected {expected} landmarks, found {found}")]
    LandmarkCount {
        file: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("expected a corpus of {expected} images, found {found}")]
    CorpusSize { expected: usize, found: usize },
    #[error("{k} folds do not divide {n} images")]
    Folds { k: usize, n: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata {path}: {source}")]
    Meta {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtMode {
    #[default]
    Average,
    Junior,
    Senior,
}

impl std::str::FromStr for GtMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average" => Ok(GtMode::Average),
            "junior" => Ok(GtMode::Junior),
            "senior" => Ok(GtMode::Senior),
            o => Err(format!(
                "unknown ground-truth mode '{o}' (average|junior|senior)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub px_per_mm: f64,
    /// Expected `(width, height)` of every image.
    pub dims: Option<(usize, usize)>,
    pub landmark_names: Vec<String>,
}

impl DatasetMeta {
    pub fn isbi() -> Self {
        DatasetMeta {
            px_per_mm: 10.0,
            dims: Some(ISBI_DIMS),
            landmark_names: ISBI_LANDMARKS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_names.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// File stem, e.g. `"001"`.
    pub id: String,
    pub image_path: PathBuf,
    pub junior: Vec<Point>,
    pub senior: Vec<Point>,
    /// Resolved according to the loader's [`GtMode`].
    pub truth: Vec<Point>,
}

impl AnnotatedImage {
    pub fn resolve(junior: &[Point], senior: &[Point], mode: GtMode) -> Vec<Point> {
        match mode {
            GtMode::Junior => junior.to_vec(),
            GtMode::Senior => senior.to_vec(),
            GtMode::Average => junior
                .iter()
                .zip(senior)
                .map(|(a, b)| Point::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0))
                .collect(),
        }
    }

    pub fn load_image(&self) -> Result<GrayImage, ImageIoError> {
        imageio::load_gray(&self.image_path)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            root: self.root.clone(),
            meta: self.meta.clone(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn labels(&self, landmark: usize) -> Vec<Point> {
        self.images.iter().map(|a| a.truth[landmark]).collect()
    }
}

/// Parses one annotation file. Lines beyond `expected` are ignored.
pub fn parse_annotation(
    path: &Path,
    text: &str,
    expected: usize,
) -> Result<Vec<Point>, DatasetError> {
    let mut pts = Vec::with_capacity(expected);
    for (i, line) in text.lines().enumerate() {
        if pts.len() == expected {
            log::debug!(
                "{}: ignoring {} trailing lines",
                path.display(),
                text.lines().count() - i
            );
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected \"x,y\", got {line:?}")))?;
        let x: f64 = x
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad x coordinate {x:?}")))?;
        let y: f64 = y
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad y coordinate {y:?}")))?;
        pts.push(Point::new(x, y));
    }
    if pts.len() != expected {
        return Err(DatasetError::LandmarkCount {
            file: path.to_path_buf(),
            expected,
            found: pts.len(),
        });
    }
    Ok(pts)
}

fn read_meta(root: &Path) -> Result<DatasetMeta, DatasetError> {
    let path = root.join("metadata.json");
    if !path.exists() {
        return Ok(DatasetMeta::isbi());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Meta { path, source })
}

/// Loads every image under `root/images` with both annotators' labels.
pub fn load_isbi(root: &Path, mode: GtMode) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let meta = read_meta(root)?;
    let img_dir = root.join("images");
    if !img_dir.is_dir() {
        return Err(DatasetError::MissingFile(img_dir));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(io_err(&img_dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(&img_dir)))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    let n_landmarks = meta.num_landmarks();
    let loaded = par::map_slice(&files, |path| -> Result<AnnotatedImage, DatasetError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if ext != "bmp" && ext != "png" {
            return Err(DatasetError::Parse {
                file: path.clone(),
                line: 0,
                msg: "unsupported image extension".into(),
            });
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mut sets = Vec::with_capacity(2);
        for who in ["junior", "senior"] {
            let ann = root.join("annotations").join(who).join(format!("{id}.txt"));
            if !ann.is_file() {
                return Err(DatasetError::MissingFile(ann));
            }
            let text = fs::read_to_string(&ann).map_err(io_err(&ann))?;
            sets.push(parse_annotation(&ann, &text, n_landmarks)?);
        }
        if let Some((w, h)) = meta.dims {
            let (iw, ih) = imageio::dimensions(path)?;
            if (iw, ih) != (w, h) {
                log::warn!(
                    "{}: {}x{} differs from expected {}x{}",
                    path.display(),
                    iw,
                    ih,
                    w,
                    h
                );
            }
        }
        let senior = sets.pop().expect("two sets");
        let junior = sets.pop().expect("two sets");
        let truth = AnnotatedImage::resolve(&junior, &senior, mode);
        Ok(AnnotatedImage {
            id,
            image_path: path.clone(),
            junior,
            senior,
            truth,
        })
    });
    let images = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        meta,
        images,
    })
}

/// Challenge split by index: 1–150 train, 151–300 test 1, 301–400 test 2.
pub fn split_challenge(ds: &Dataset) -> Result<(Dataset, Dataset, Dataset), DatasetError> {
    if ds.len() != 400 {
        return Err(DatasetError::CorpusSize {
            expected: 400,
            found: ds.len(),
        });
    }
    let r = |a: usize, b: usize| ds.subset(&(a..b).collect::<Vec<_>>());
    Ok((r(0, 150), r(150, 300), r(300, 400)))
}

/// Seeded shuffle cut into `k` contiguous test folds of indices.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if k == 0 || !n.is_multiple_of(k) {
        return Err(DatasetError::Folds { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(n / k).map(|c| c.to_vec()).collect())
}

/// Train indices complementary to one test fold.
pub fn fold_train(folds: &[Vec<usize>], test: usize) -> Vec<usize> {
    let mut v: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != test)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    v.sort_unstable();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub side: usize,
    pub count: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub distractors: usize,
    /// Peak amplitude of the radial gradient centered on the landmark.
    pub cue_strength: f64,
    pub seed: u64,
    /// Landmarks per image; the first carries the radial cue.
    pub landmarks: usize,
    pub px_per_mm: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            side: 1024,
            count: 64,
            noise: 0.02,
            distractors: 3,
            cue_strength: 0.4,
            seed: 0,
            landmarks: 1,
            px_per_mm: 10.0,
        }
    }
}

const BACKGROUND: f64 = 0.1;
const CROSS_AMPLITUDE: f64 = 0.4;
const CROSS_ARM: f64 = 5.0;
const CROSS_HALF_WIDTH: f64 = 1.0;

/// Coverage of a cross centered at `c` over the pixel with center `(px, py)`,
/// supersampled 4×4.
fn cross_coverage(c: Point, px: f64, py: f64) -> f64 {
    let mut hit = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let dx = (px - 0.375 + sx as f64 * 0.25 - c.x).abs();
            let dy = (py - 0.375 + sy as f64 * 0.25 - c.y).abs();
            let horiz = dx <= CROSS_ARM && dy <= CROSS_HALF_WIDTH;
            let vert = dy <= CROSS_ARM && dx <= CROSS_HALF_WIDTH;
            if horiz || vert {
                hit += 1;
            }
        }
    }
    hit as f64 / 16.0
}

/// Offset of landmark `k` from the cued landmark.
pub fn synthetic_offset(k: usize, side: usize) -> Point {
    if k == 0 {
        return Point::new(0.0, 0.0);
    }
    let angle = k as f64 * 2.399963;
    let r = side as f64 * (0.03 + 0.005 * k as f64);
    Point::new((r * angle.cos()).round(), (r * angle.sin()).round())
}

/// One rendered synthetic image and its landmarks.
pub struct SyntheticImage {
    pub image: GrayImage,
    pub landmarks: Vec<Point>,
}

/// Renders image `index` of a synthetic set.
///
/// Noise-free pixel value is `0.1 + cue·max(0, 1 − r/(side/2)) + 0.4·cross`,
/// with `r` the distance to the cued landmark.
pub fn render_synthetic(config: &SyntheticConfig, index: usize) -> SyntheticImage {
    let s = config.side;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let margin = Point::new(0.2 * s as f64, 0.2 * s as f64);
    let span = 0.6 * s as f64;
    let lm = Point::new(
        (margin.x + rng.random::<f64>() * span).round(),
        (margin.y + rng.random::<f64>() * span).round(),
    );
    let landmarks: Vec<Point> = (0..config.landmarks)
        .map(|k| lm + synthetic_offset(k, s))
        .collect();
    let distractors: Vec<Point> = (0..config.distractors)
        .map(|_| {
            Point::new(
                (rng.random::<f64>() * (s as f64 - 20.0) + 10.0).round(),
                (rng.random::<f64>() * (s as f64 - 20.0) + 10.0).round(),
            )
        })
        .collect();
    let crosses: Vec<Point> = landmarks.iter().chain(&distractors).copied().collect();
    let radius = s as f64 / 2.0;
    let mut pixels: Vec<f32> = (0..s * s)
        .map(|i| {
            let (px, py) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
            let r = Point::new(px, py).dist(lm);
            (BACKGROUND + config.cue_strength * (1.0 - r / radius).max(0.0)) as f32
        })
        .collect();
    let reach = (CROSS_ARM + 1.0).ceil() as isize;
    for c in &crosses {
        let (cx, cy) = (c.x.floor() as isize, c.y.floor() as isize);
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                    continue;
                }
                let cov = cross_coverage(*c, x as f64 + 0.5, y as f64 + 0.5);
                pixels[y as usize * s + x as usize] += (CROSS_AMPLITUDE * cov) as f32;
            }
        }
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("finite noise");
        for p in &mut pixels {
            *p += rng.sample::<f64, _>(normal) as f32;
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    SyntheticImage {
        image: GrayImage::new(s, s, pixels).expect("valid synthetic image"),
        landmarks,
    }
}

fn validate_synthetic(config: &SyntheticConfig) -> Result<(), DatasetError> {
    if config.side < 128 {
        return Err(DatasetError::Config(format!("side {} < 128", config.side)));
    }
    if config.count == 0 || config.landmarks == 0 {
        return Err(DatasetError::Config(
            "count and landmarks must be at least 1".into(),
        ));
    }
    if !(config.noise >= 0.0 && config.px_per_mm > 0.0) {
        return Err(DatasetError::Config(
            "noise must be ≥ 0 and px_per_mm > 0".into(),
        ));
    }
    if config.landmarks > 1 {
        let worst = (1..config.landmarks)
            .map(|k| synthetic_offset(k, config.side).norm())
            .fold(0.0, f64::max);
        if worst > 0.2 * config.side as f64 {
            return Err(DatasetError::Config(format!(
                "{} landmarks do not fit a {} px image",
                config.landmarks, config.side
            )));
        }
    }
    Ok(())
}

/// Renders a synthetic set in memory.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Vec<SyntheticImage>, DatasetError> {
    validate_synthetic(config)?;
    Ok(par::map_range(config.count, |i| {
        render_synthetic(config, i)
    }))
}

pub fn synthetic_meta(config: &SyntheticConfig) -> DatasetMeta {
    DatasetMeta {
        px_per_mm: config.px_per_mm,
        dims: Some((config.side, config.side)),
        landmark_names: (0..config.landmarks)
            .map(|k| format!("L{}", k + 1))
            .collect(),
    }
}

fn format_points(pts: &[Point]) -> String {
    pts.iter().map(|p| format!("{},{}\n", p.x, p.y)).collect()
}

/// Renders a synthetic set and writes it in the standard layout, images as
/// 8-bit PNG.
pub fn write_synthetic(config: &SyntheticConfig, root: &Path) -> Result<DatasetMeta, DatasetError> {
    validate_synthetic(config)?;
    for d in ["images", "annotations/junior", "annotations/senior"] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let width = (config.count.max(999)).to_string().len();
    let results = par::map_range(config.count, |i| -> Result<(), DatasetError> {
        let img = render_synthetic(config, i);
        let id = format!("{:0width$}", i + 1);
        imageio::save_gray(&img.image, &root.join("images").join(format!("{id}.png")))?;
        let text = format_points(&img.landmarks);
        for who in ["junior", "senior"] {
            let p = root.join("annotations").join(who).join(format!("{id}.txt"));
            fs::write(&p, &text).map_err(io_err(&p))?;
        }
        Ok(())
    });
    results.into_iter().collect::<Result<(), _>>()?;
    let meta = synthetic_meta(config);
    let p = root.join("metadata.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("json")).map_err(io_err(&p))?;
    Ok(meta)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fvpy::bench::{run_scaling, BenchConfig};
use fvpy::dataset::{self, Dataset, GtMode, SyntheticConfig};
use fvpy::glimpse::Augmentation;
use fvpy::metrics::{EvalReport, LandmarkReport};
use fvpy::model::{load_params, save_params, write_sidecar, Model, Preset};
use fvpy::pyramid::GaussianPyramid;
use fvpy::trainer::{self, EpochLog, TrainConfig, TrainObserver};
use fvpy::{imageio, par, Point};

/// Errors that should exit with status 2: unusable inputs.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "fvpy",
    version,
    about = "Foveated glimpse-pyramid landmark regression"
)]
struct Cli {
    /// Worker threads (falls back to FVPY_THREADS, then all cores).
    #[arg(long, global = true, env = "FVPY_THREADS")]
    threads: Option<usize>,
    /// JSON file with defaults for any training option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per selected landmark.
    Train(TrainArgs),
    /// Evaluate trained models on a labelled split.
    Eval(EvalArgs),
    /// Print landmark coordinates for one image.
    Infer(InferArgs),
    /// Per-iteration cost versus image side length.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Landmark index, comma-separated list, or "all".
    #[arg(long, default_value = "all")]
    landmark: String,
    #[arg(long)]
    preset: Option<Preset>,
    /// Epochs per learning-rate phase, e.g. "20,20".
    #[arg(long)]
    epochs: Option<String>,
    /// Learning rates per phase, e.g. "1e-4,1e-5".
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_train: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable rotation/scale augmentation.
    #[arg(long)]
    no_augment: bool,
    /// all | challenge | fold=K (K in 0..4, trains on the other folds)
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value = "average")]
    gt: GtMode,
    #[arg(long, default_value = "models")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "models")]
    models: PathBuf,
    /// all | test1 | test2 | fold=K
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value = "average")]
    gt: GtMode,
    #[arg(long)]
    t_infer: Option<usize>,
    /// Also evaluate with this many iterations and report the difference.
    #[arg(long)]
    compare_t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    image: PathBuf,
    #[arg(long, default_value = "models")]
    models: PathBuf,
    #[arg(long)]
    t_infer: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated side lengths.
    #[arg(long, default_value = "256,512,1024,2048,4096")]
    sides: String,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 1024)]
    side: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    cue: Option<f64>,
    #[arg(long, default_value_t = 1)]
    landmarks: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Contents of `--config`; every field optional.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    t_infer: Option<usize>,
    train: Option<serde_json::Value>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| anyhow!("invalid {what} '{p}'"))
        })
        .collect()
}

fn parse_pair<T: std::str::FromStr + Copy>(s: &str, what: &str) -> Result<(T, T)> {
    match parse_list::<T>(s, what)?[..] {
        [a, b] => Ok((a, b)),
        _ => bail!("{what} takes two comma-separated values"),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| input_err(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn train_config(file: &FileConfig, args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &file.train {
        Some(v) => serde_json::from_value(v.clone()).context("config 'train' section")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = file.seed {
        c.seed = s;
    }
    if let Some(t) = file.t_infer {
        c.t_infer = t;
    }
    if let Some(p) = args.preset {
        c.preset = p;
    }
    if let Some(e) = &args.epochs {
        c.epochs = parse_pair(e, "epochs")?;
    }
    if let Some(l) = &args.lr {
        c.learning_rates = parse_pair(l, "learning rates")?;
    }
    if let Some(b) = args.batch_size {
        c.batch_size = b;
    }
    if let Some(t) = args.t_train {
        c.t_train = t;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if args.no_augment {
        c.augmentation = Augmentation::NONE;
    }
    c.validate()?;
    Ok(c)
}

fn load_dataset(root: &Path, gt: GtMode) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(input_err(format!(
            "data directory {} does not exist",
            root.display()
        )));
    }
    dataset::load_isbi(root, gt).map_err(|e| input_err(e.to_string()))
}

fn select_split(ds: &Dataset, split: &str, training: bool, seed: u64) -> Result<Dataset> {
    if split == "all" {
        return Ok(ds.clone());
    }
    if let Some(k) = split.strip_prefix("fold=") {
        let k: usize = k.parse().map_err(|_| anyhow!("invalid fold '{k}'"))?;
        let folds = dataset::kfold(ds.len(), 4, seed)?;
        if k >= folds.len() {
            bail!("fold {k} out of range 0..4");
        }
        let idx = if training {
            dataset::fold_train(&folds, k)
        } else {
            folds[k].clone()
        };
        return Ok(ds.subset(&idx));
    }
    let (train, t1, t2) = dataset::split_challenge(ds)?;
    match (split, training) {
        ("challenge", true) | ("train", _) => Ok(train),
        ("test1", false) => Ok(t1),
        ("test2", false) => Ok(t2),
        _ => bail!("unknown split '{split}'"),
    }
}

fn select_landmarks(spec: &str, count: usize) -> Result<Vec<usize>> {
    let v: Vec<usize> = if spec == "all" {
        (0..count).collect()
    } else {
        parse_list(spec, "landmark")?
    };
    if let Some(bad) = v.iter().find(|&&i| i >= count) {
        bail!("landmark {bad} out of range (dataset has {count})");
    }
    Ok(v)
}

fn model_path(dir: &Path, landmark: usize) -> PathBuf {
    dir.join(format!("landmark_{landmark:02}.fvpy"))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    save_params(&model.params, path)?;
    write_sidecar(&model.params, &path.with_extension("json"))?;
    Ok(())
}

fn load_pyramids(ds: &Dataset, levels: Option<usize>) -> Result<Vec<GaussianPyramid>> {
    let loaded = par::map_slice(&ds.images, |a| -> Result<GaussianPyramid> {
        let img = a
            .load_image()
            .map_err(|e| input_err(format!("{}: {e}", a.image_path.display())))?;
        Ok(match levels {
            Some(n) => GaussianPyramid::build(img, n)?,
            None => GaussianPyramid::build_auto(img)?,
        })
    });
    loaded.into_iter().collect()
}

struct Checkpointer {
    dir: PathBuf,
    landmark: usize,
    every: usize,
}

impl TrainObserver for Checkpointer {
    fn on_epoch(&mut self, row: &EpochLog, model: &Model) -> Result<(), String> {
        if self.every > 0 && row.epoch.is_multiple_of(self.every) {
            let p = self.dir.join(format!(
                "landmark_{:02}_epoch{:03}.fvpy",
                self.landmark, row.epoch
            ));
            save_params(&model.params, &p).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let base = train_config(file, args)?;
    let ds = load_dataset(&args.data, args.gt)?;
    let train_set = select_split(&ds, &args.split, true, base.seed)?;
    if train_set.is_empty() {
        return Err(input_err(format!("no images in {}", args.data.display())));
    }
    let landmarks = select_landmarks(&args.landmark, ds.meta.num_landmarks())?;
    let pyramids = load_pyramids(&train_set, None)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = args.out.join("checkpoints");
    if base.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt)?;
    }
    let results = par::map_slice(&landmarks, |&lm| -> Result<()> {
        let config = TrainConfig {
            landmark: lm,
            ..base.clone()
        };
        let labels = train_set.labels(lm);
        let mut obs = Checkpointer {
            dir: ckpt.clone(),
            landmark: lm,
            every: config.checkpoint_every,
        };
        let mut outcome = trainer::train(&pyramids, &labels, &config, &mut obs)
            .with_context(|| format!("training landmark {lm}"))?;
        outcome.model.params.meta.landmark_name = ds.meta.landmark_names.get(lm).cloned();
        save_model(&outcome.model, &model_path(&args.out, lm))?;
        let log = fs::File::create(args.out.join(format!("landmark_{lm:02}_log.csv")))?;
        trainer::write_log_csv(log, &outcome.log)?;
        let last = outcome.log.last();
        println!(
            "landmark {lm}: {} steps, final loss {:.4}, train radial error {:.3} px",
            outcome.steps,
            last.map_or(f64::NAN, |r| r.mean_loss),
            last.map_or(f64::NAN, |r| r.mean_radial_error_px)
        );
        Ok(())
    });
    results.into_iter().collect()
}

fn load_models(dir: &Path, only: Option<&[usize]>) -> Result<Vec<Model>> {
    if !dir.is_dir() {
        return Err(input_err(format!(
            "model directory {} does not exist",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "fvpy")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("landmark_") && !s.contains("epoch"))
        })
        .collect();
    paths.sort();
    let mut models = Vec::new();
    for p in paths {
        let params = load_params(&p).map_err(|e| input_err(format!("{}: {e}", p.display())))?;
        if only.is_some_and(|o| !o.contains(&params.meta.landmark)) {
            continue;
        }
        models.push(Model::from_params(params)?);
    }
    if models.is_empty() {
        return Err(input_err(format!("no models found in {}", dir.display())));
    }
    Ok(models)
}

fn stats_of(model: &Model) -> Result<trainer::LandmarkStats> {
    model.meta().stats.ok_or_else(|| {
        anyhow!(
            "model for landmark {} has no label statistics",
            model.meta().landmark
        )
    })
}

/// Final estimates per model per image, at each requested iteration count.
fn predict_all(models: &[Model], ds: &Dataset, ts: &[usize]) -> Result<Vec<Vec<Vec<Point>>>> {
    let t_max = ts.iter().copied().max().unwrap_or(0);
    let levels = models[0].levels();
    if models.iter().any(|m| m.levels() != levels) {
        bail!("models disagree on pyramid depth");
    }
    let per_image = par::map_slice(&ds.images, |a| -> Result<Vec<Vec<Point>>> {
        let img = a
            .load_image()
            .map_err(|e| input_err(format!("{}: {e}", a.image_path.display())))?;
        let pyr = GaussianPyramid::build(img, levels)?;
        models
            .iter()
            .map(|m| {
                let traj = trainer::infer_trajectory(m, &pyr, &stats_of(m)?, t_max)?;
                Ok(ts.iter().map(|&t| traj[t]).collect())
            })
            .collect()
    });
    per_image.into_iter().collect()
}

fn build_report(
    title: &str,
    models: &[Model],
    ds: &Dataset,
    preds: &[Vec<Vec<Point>>],
    ti: usize,
) -> Result<EvalReport> {
    let rows = models
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let lm = m.meta().landmark;
            let name = m
                .meta()
                .landmark_name
                .clone()
                .or_else(|| ds.meta.landmark_names.get(lm).cloned())
                .unwrap_or_else(|| format!("L{}", lm + 1));
            let p: Vec<Point> = preds.iter().map(|img| img[mi][ti]).collect();
            let truth = ds.labels(lm);
            let a: Vec<Point> = ds.images.iter().map(|x| x.junior[lm]).collect();
            let b: Vec<Point> = ds.images.iter().map(|x| x.senior[lm]).collect();
            Ok(LandmarkReport::new(
                &name,
                &p,
                &truth,
                Some((&a, &b)),
                ds.meta.px_per_mm,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(title, rows)?)
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig) -> Result<()> {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let t_infer = args.t_infer.or(file.t_infer).unwrap_or(10);
    let ds = load_dataset(&args.data, args.gt)?;
    let test = select_split(&ds, &args.split, false, seed)?;
    if test.is_empty() {
        return Err(input_err("evaluation split is empty"));
    }
    let models = load_models(&args.models, None)?;
    if let Some(m) = models
        .iter()
        .find(|m| m.meta().landmark >= ds.meta.num_landmarks())
    {
        bail!(
            "model landmark {} not present in dataset",
            m.meta().landmark
        );
    }
    let mut ts = vec![t_infer];
    if let Some(c) = args.compare_t {
        ts.push(c);
    }
    let preds = predict_all(&models, &test, &ts)?;
    fs::create_dir_all(&args.out)?;
    let mut summary = serde_json::Map::new();
    for (ti, &t) in ts.iter().enumerate() {
        let title = format!("{} split, T_infer = {}", args.split, t);
        let report = build_report(&title, &models, &test, &preds, ti)?;
        let stem = format!("report_t{t}");
        fs::write(
            args.out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&report)?,
        )?;
        fs::write(args.out.join(format!("{stem}.txt")), report.to_text())?;
        print!("{}", report.to_text());
        summary.insert(format!("mre_mm_t{t}"), report.average.mre_mm.into());
    }
    if let [a, b] = ts[..] {
        let d = summary[&format!("mre_mm_t{b}")]
            .as_f64()
            .unwrap_or(f64::NAN)
            - summary[&format!("mre_mm_t{a}")]
                .as_f64()
                .unwrap_or(f64::NAN);
        println!("MRE(T={b}) - MRE(T={a}) = {d:+.4} mm");
        summary.insert("delta_mm".into(), d.into());
    }
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn cmd_infer(args: &InferArgs, file: &FileConfig) -> Result<()> {
    let t_infer = args.t_infer.or(file.t_infer).unwrap_or(10);
    let img = imageio::load_gray(&args.image)
        .map_err(|e| input_err(format!("{}: {e}", args.image.display())))?;
    let models = load_models(&args.models, None)?;
    let levels = models[0].levels();
    let pyr = GaussianPyramid::build(img, levels)?;
    let rows = par::map_slice(&models, |m| -> Result<String> {
        let x = trainer::infer(m, &pyr, &stats_of(m)?, t_infer)?;
        let name = m
            .meta()
            .landmark_name
            .clone()
            .unwrap_or_else(|| format!("L{}", m.meta().landmark + 1));
        Ok(format!("{} {:.2} {:.2}", name, x.x, x.y))
    });
    for r in rows {
        println!("{}", r?);
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs, file: &FileConfig) -> Result<()> {
    let cfg = BenchConfig {
        sides: parse_list(&args.sides, "side")?,
        iterations: args.iterations,
        rounds: args.rounds,
        seed: args.seed.or(file.seed).unwrap_or(0),
        ..BenchConfig::default()
    };
    let report = run_scaling(&cfg);
    print!("{}", report.to_text());
    for r in &report.results {
        let expected = fvpy::pyramid::num_levels(r.side, r.side, 64) * 4096;
        if r.glimpse_pixels != expected {
            bail!(
                "side {}: sampled {} pixels, expected {}",
                r.side,
                r.glimpse_pixels,
                expected
            );
        }
    }
    if let Some(ratio) = report.ratio(4096, 256) {
        println!("t(4096)/t(256) = {ratio:.3}");
    }
    if let Some(p) = &args.out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, file: &FileConfig) -> Result<()> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        side: args.side,
        count: args.count,
        noise: args.noise.unwrap_or(d.noise),
        distractors: args.distractors.unwrap_or(d.distractors),
        cue_strength: args.cue.unwrap_or(d.cue_strength),
        seed: args.seed.or(file.seed).unwrap_or(d.seed),
        landmarks: args.landmarks,
        px_per_mm: d.px_per_mm,
    };
    dataset::write_synthetic(&cfg, &args.out)?;
    println!("wrote {} images to {}", cfg.count, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    if let Some(t) = cli.threads.or(file.threads) {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        par::init_threads(t);
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Infer(a) => cmd_infer(a, &file),
        Command::Bench(a) => cmd_bench(a, &file),
        Command::Synth(a) => cmd_synth(a, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<InputError>().is_some()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

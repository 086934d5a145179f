//! Command implementations behind the `ivusnet` binary.

pub mod ablation;
pub mod pipeline;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use ivusnet::arch::{load_checkpoint, save_checkpoint, ArchConfig, Network};
use ivusnet::augment::AugmentConfig;
use ivusnet::data::{
    load_manifest, read_ivpm, read_mask, read_pgm, synth_phantoms, write_ivpm, write_mask, FrameRecord,
    ProbMap, Split, Target,
};
use ivusnet::gradcheck::run_suite;
use ivusnet::metrics::{evaluate, EvalFrame, Prediction};
use ivusnet::postprocess::{binarize, largest_component, trace_boundary, DEFAULT_THRESHOLD};
use ivusnet::train::{train_model, TrainConfig};

use ablation::{ablation_csv, arm_mean, run_ablation, AblationSetup, Arm};
use pipeline::{contour_csv, extract_full_res, frames_for, predict_prob, read_contour_csv, replica_configs};

pub const SEED_ENV: &str = "IVUSNET_SEED";

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<ivusnet::Error> for CliError {
    fn from(e: ivusnet::Error) -> Self {
        match e {
            ivusnet::Error::Contract(_) => CliError::internal(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ivusnet", version, about = "IVUS lumen and media segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic phantom frames and a manifest.
    Synth(SynthArgs),
    /// Train one or more replicas for one target.
    Train(TrainArgs),
    /// Ensemble prediction and contour extraction.
    Predict(PredictArgs),
    /// Score predictions against a manifest's masks.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck,
    /// Compare the baseline against refine-less and augmentation-free arms.
    ReproduceAblation(AblationArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Lumen,
    Media,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Lumen => Target::Lumen,
            TargetArg::Media => Target::Media,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn select(self, records: Vec<FrameRecord>) -> Vec<(usize, FrameRecord)> {
        records
            .into_iter()
            .enumerate()
            .filter(|(_, r)| match self {
                SplitArg::Train => r.split == Split::Train,
                SplitArg::Test => r.split == Split::Test,
                SplitArg::All => true,
            })
            .collect()
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Frames at the end of the list marked as test split.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

/// Architecture, optimisation and augmentation flags.
#[derive(Args, Debug, Clone)]
pub struct TrainingFlags {
    #[arg(long, value_enum, default_value_t = TargetArg::Lumen)]
    pub target: TargetArg,
    #[arg(long, default_value = "paper")]
    pub preset: String,
    /// Drop every refining branch.
    #[arg(long)]
    pub no_refine: bool,
    /// Train on the original frames only.
    #[arg(long)]
    pub no_aug: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 6)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 96)]
    pub epochs: usize,
    #[arg(long, default_value_t = 144)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub validation_count: usize,
    #[arg(long, default_value_t = 0.10)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    pub blackout_prob: f64,
    /// Train on 2x2-averaged frames.
    #[arg(long)]
    pub half_res: bool,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

impl TrainingFlags {
    pub fn resolve(&self) -> CliResult<(ArchConfig, TrainConfig, AugmentConfig)> {
        let mut arch = ArchConfig::preset(&self.preset)?;
        if self.no_refine {
            arch = arch.without_refine();
        }
        let tcfg = TrainConfig {
            target: self.target.into(),
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            iterations_per_epoch: self.iterations,
            validation_count: self.validation_count,
            seed: self.seed,
        };
        let acfg = AugmentConfig {
            noise_sigma: self.noise_sigma,
            noise_prob: self.noise_prob,
            blackout_prob: self.blackout_prob,
            seed: self.seed,
            enabled: !self.no_aug,
        };
        tcfg.validate()?;
        acfg.validate()?;
        arch.validate()?;
        Ok((arch, tcfg, acfg))
    }
}

fn describe_run(arch: &ArchConfig, tcfg: &TrainConfig, acfg: &AugmentConfig, half: bool) -> String {
    let depths = arch.block_depths.map(|d| d.to_string()).join(",");
    format!(
        "{}\narch: depths={depths} convs={} refine={} input_channels={}\naugment: enabled={} noise_sigma={} noise_prob={} blackout_prob={}\nhalf_res={half}",
        tcfg.describe(),
        arch.main_convs_per_block,
        arch.refine,
        arch.input_channels,
        acfg.enabled,
        acfg.noise_sigma,
        acfg.noise_prob,
        acfg.blackout_prob,
    )
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: TrainingFlags,
    /// Manifest rows to train on.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Replicas to train; replica i uses seed + i.
    #[arg(long, default_value_t = 10)]
    pub ensemble: usize,
    /// Checkpoint path. With several replicas, `_<i>` is added to the stem.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV path; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Comma-separated checkpoints to average.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// One image. Mutually exclusive with --manifest.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out_mask: Option<PathBuf>,
    #[arg(long)]
    pub out_prob: Option<PathBuf>,
    #[arg(long)]
    pub out_contour: Option<PathBuf>,
    /// Predict every selected frame of a manifest into --out-dir.
    #[arg(long, requires_all = ["out_dir", "target"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Names the files written in manifest mode.
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Run the models on 2x2-averaged frames.
    #[arg(long)]
    pub half_res: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub pixel_spacing_mm: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: TrainingFlags,
    #[arg(long, default_value_t = 5)]
    pub models_per_arm: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck => cmd_gradcheck(),
        Command::ReproduceAblation(a) => cmd_ablation(&a),
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    println!(
        "synth: out={} count={} size={} test_count={} seed={}",
        a.out.display(),
        a.count,
        a.size,
        a.test_count,
        a.seed
    );
    let records = synth_phantoms(&a.out, a.seed, a.count, a.size, a.test_count)?;
    println!("wrote {} frames and {}", records.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

/// `dir/model.ckpt` with replica 3 becomes `dir/model_3.ckpt`.
pub fn replica_path(path: &Path, i: usize, count: usize) -> PathBuf {
    if count == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{i}"),
    };
    path.with_file_name(name)
}

fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

fn load_records(manifest: &Path, split: SplitArg) -> CliResult<Vec<(usize, FrameRecord)>> {
    let records = split.select(load_manifest(manifest)?);
    if records.is_empty() {
        return Err(CliError::usage(format!("{} has no {split:?} frames", manifest.display())));
    }
    Ok(records)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let (arch, tcfg, acfg) = a.flags.resolve()?;
    if a.ensemble == 0 {
        return Err(CliError::usage("--ensemble must be at least 1"));
    }
    println!("{}", describe_run(&arch, &tcfg, &acfg, a.flags.half_res));
    println!("ensemble={} split={:?} manifest={}", a.ensemble, a.split, a.manifest.display());
    let records: Vec<FrameRecord> = load_records(&a.manifest, a.split)?.into_iter().map(|(_, r)| r).collect();
    let frames = frames_for(&records, tcfg.target, a.flags.half_res)?;
    for i in 0..a.ensemble {
        let (t, g) = replica_configs(&tcfg, &acfg, tcfg.seed, i);
        let (net, history) = train_model(&frames, &arch, &t, &g, |e| {
            let jm = e.val_jm.map(|v| format!(" val_jm={v:.4}")).unwrap_or_default();
            println!("replica {i} epoch {} loss={:.5}{jm}", e.epoch, e.loss);
        })?;
        let ckpt = replica_path(&a.out, i, a.ensemble);
        save_checkpoint(&net, &ckpt)?;
        let hist = match &a.history {
            Some(h) => replica_path(h, i, a.ensemble),
            None => history_path(&ckpt),
        };
        write_text(&hist, &history.to_csv())?;
        println!("wrote {} and {}", ckpt.display(), hist.display());
    }
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> CliResult<Vec<Network<f32>>> {
    let models: Vec<Network<f32>> = paths
        .iter()
        .map(|p| load_checkpoint(p).map_err(|e| io_err(p, e)))
        .collect::<CliResult<_>>()?;
    if let Some(first) = models.first() {
        for (m, p) in models.iter().zip(paths) {
            if m.config().input_channels != first.config().input_channels {
                return Err(CliError::usage(format!(
                    "{} expects {} input channels, {} expects {}",
                    p.display(),
                    m.config().input_channels,
                    paths[0].display(),
                    first.config().input_channels
                )));
            }
        }
    }
    Ok(models)
}

/// File names used by `predict --manifest` and read by `eval`.
pub fn prediction_file(dir: &Path, target: Target, index: usize, kind: &str, ext: &str) -> PathBuf {
    let prefix = match target {
        Target::Lumen => "lum",
        Target::Media => "med",
    };
    dir.join(format!("{prefix}_{kind}_{index:04}.{ext}"))
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult {
    let models = load_models(&a.models)?;
    println!(
        "predict: models={} threshold={} half_res={}",
        models.len(),
        a.threshold,
        a.half_res
    );
    if let Some(image) = &a.image {
        let out_mask = a
            .out_mask
            .as_ref()
            .ok_or_else(|| CliError::usage("--out-mask is required with --image"))?;
        let img = read_pgm(image).map_err(|e| io_err(image, e))?;
        let prob = predict_prob(&models, &img, a.half_res)?;
        if let Some(path) = &a.out_prob {
            write_ivpm(&prob, path)?;
        }
        let extraction = extract_full_res(&prob, img.width, img.height, a.threshold, a.half_res)?;
        write_mask(&extraction.mask, out_mask)?;
        if let Some(path) = &a.out_contour {
            write_text(path, &contour_csv(&extraction.contour.points))?;
        }
        let e = extraction.ellipse;
        println!(
            "ellipse: cx={:.3} cy={:.3} a={:.3} b={:.3} theta={:.4}",
            e.cx, e.cy, e.a, e.b, e.theta
        );
        return Ok(());
    }
    let manifest = a.manifest.as_ref().expect("clap requires --image or --manifest");
    let dir = a.out_dir.as_ref().expect("clap requires --out-dir");
    let target: Target = a.target.expect("clap requires --target").into();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut failures = Vec::new();
    for (i, r) in load_records(manifest, a.split)? {
        let img = r.load_image()?;
        let prob = predict_prob(&models, &img, a.half_res)?;
        write_ivpm(&prob, prediction_file(dir, target, i, "prob", "ivpm"))?;
        match extract_full_res(&prob, img.width, img.height, a.threshold, a.half_res) {
            Ok(e) => {
                write_mask(&e.mask, prediction_file(dir, target, i, "pred", "pgm"))?;
                write_text(&prediction_file(dir, target, i, "pred", "csv"), &contour_csv(&e.contour.points))?;
            }
            Err(e @ (ivusnet::Error::EmptyRegion { .. } | ivusnet::Error::Fit(_))) => {
                failures.push(format!("frame {i}: {e}"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if failures.is_empty() {
        println!("wrote predictions to {}", dir.display());
        Ok(())
    } else {
        Err(CliError::usage(format!("no contour for:\n  {}", failures.join("\n  "))))
    }
}

fn read_prediction(dir: &Path, target: Target, index: usize, missing: &mut Vec<PathBuf>) -> CliResult<Option<Prediction>> {
    let mask_path = prediction_file(dir, target, index, "pred", "pgm");
    if !mask_path.exists() {
        missing.push(mask_path);
        return Ok(None);
    }
    let mask = read_mask(&mask_path)?;
    let csv = prediction_file(dir, target, index, "pred", "csv");
    let contour = if csv.exists() {
        read_contour_csv(&csv).map_err(|e| CliError::usage(e.to_string()))?
    } else {
        trace_boundary(&mask)?.points
    };
    Ok(Some(Prediction { mask, contour }))
}

fn read_pre_ellipse(dir: &Path, target: Target, index: usize, threshold: f32, width: usize, height: usize) -> CliResult<Option<Prediction>> {
    let path = prediction_file(dir, target, index, "prob", "ivpm");
    if !path.exists() {
        return Ok(None);
    }
    let map: ProbMap = read_ivpm(&path)?;
    if (map.width, map.height) != (width, height) {
        return Ok(None);
    }
    Ok(largest_component(&binarize(&map, threshold))
        .ok()
        .and_then(|m| trace_boundary(&m).ok().map(|c| Prediction { mask: m, contour: c.points })))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    if !(a.pixel_spacing_mm > 0.0 && a.pixel_spacing_mm.is_finite()) {
        return Err(CliError::usage("--pixel-spacing-mm must be positive"));
    }
    println!(
        "eval: manifest={} pred_dir={} pixel_spacing_mm={} split={:?}",
        a.manifest.display(),
        a.pred_dir.display(),
        a.pixel_spacing_mm,
        a.split
    );
    let records = load_records(&a.manifest, a.split)?;
    let mut missing = Vec::new();
    let mut frames = Vec::with_capacity(records.len());
    let mut raw_frames = Vec::with_capacity(records.len());
    let mut raw_complete = true;
    for (i, r) in &records {
        let image = r.load_image()?;
        let (w, h) = (image.width, image.height);
        let truth = [r.load_mask(Target::Lumen, w, h)?, r.load_mask(Target::Media, w, h)?];
        let pred = [
            read_prediction(&a.pred_dir, Target::Lumen, *i, &mut missing)?,
            read_prediction(&a.pred_dir, Target::Media, *i, &mut missing)?,
        ];
        let raw = [
            read_pre_ellipse(&a.pred_dir, Target::Lumen, *i, a.threshold, w, h)?,
            read_pre_ellipse(&a.pred_dir, Target::Media, *i, a.threshold, w, h)?,
        ];
        raw_complete &= raw.iter().all(Option::is_some);
        let id = format!("{i} ({})", r.image.display());
        raw_frames.push(EvalFrame { id: id.clone(), category: r.category, truth: truth.clone(), pred: raw });
        frames.push(EvalFrame { id, category: r.category, truth, pred });
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::usage(format!("missing prediction files:\n  {}", list.join("\n  "))));
    }
    let report = evaluate(&frames, a.pixel_spacing_mm)?;
    println!("{}", report.to_text());
    if raw_complete {
        let raw = evaluate(&raw_frames, a.pixel_spacing_mm)?;
        println!("pre-ellipse (largest thresholded component):\n{}", raw.to_text());
    }
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_gradcheck() -> CliResult {
    let checks = run_suite()?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<16} cases={:<3} max_rel_err={:.3e} tol={:.0e} {}",
            c.op,
            c.cases,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
        ok &= c.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::internal("gradient check failed"))
    }
}

pub fn cmd_ablation(a: &AblationArgs) -> CliResult {
    let (arch, tcfg, acfg) = a.flags.resolve()?;
    if a.models_per_arm == 0 || a.seeds.is_empty() {
        return Err(CliError::usage("need at least one model per arm and one seed"));
    }
    println!("{}", describe_run(&arch, &tcfg, &acfg, a.flags.half_res));
    println!("models_per_arm={} seeds={:?}", a.models_per_arm, a.seeds);
    let train: Vec<FrameRecord> = load_records(&a.manifest, SplitArg::Train)?.into_iter().map(|(_, r)| r).collect();
    let test: Vec<FrameRecord> = load_records(&a.manifest, SplitArg::Test)?.into_iter().map(|(_, r)| r).collect();
    let frames = frames_for(&train, tcfg.target, a.flags.half_res)?;
    let setup = AblationSetup {
        train: &frames,
        test: &test,
        target: tcfg.target,
        arch,
        tcfg,
        acfg,
        models_per_arm: a.models_per_arm,
        threshold: a.threshold,
        half: a.flags.half_res,
    };
    let rows = run_ablation(&setup, &Arm::ALL, &a.seeds, |r| {
        println!("seed {} {:<9} jm={:.4}", r.seed, r.arm.as_str(), r.jm);
    })?;
    for arm in Arm::ALL {
        if let Some(m) = arm_mean(&rows, arm) {
            println!("{:<9} mean jm={m:.4}", arm.as_str());
        }
    }
    if let Some(path) = &a.csv {
        write_text(path, &ablation_csv(&rows))?;
    }
    Ok(())
}

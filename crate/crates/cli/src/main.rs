mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperdet::evalkit::{average_spectrum, robustness_sweep, write_sweep_artifacts, SweepGrid};
use hyperdet::filterbank::load_kernels;
use hyperdet::trainer::train_with_summary;
use hyperdet::{evaluate, Dataset, DetectorModel, FilterBank, FilterGroup, Image, MergeMode, Perturbation};
use serde_json::json;

/// Exit status 1 for validation problems, 2 for failures during a run.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn validation(msg: impl Into<String>) -> Self {
        Failure::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<hyperdet::Error> for Failure {
    fn from(e: hyperdet::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "hyperdet", version, arg_required_else_help = true, about = "Synthetic-image detection with grouped SRM views and hypernetwork LoRA experts")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace). Overrides HYPERDET_LOG.
    #[arg(long, global = true)]
    log_level: Option<String>,

    /// Worker threads for scoring and data preparation; 0 = all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the hypernetwork and head; writes a checkpoint directory.
    Train(TrainArgs),
    /// Score images with a checkpoint.
    Detect(DetectArgs),
    /// Per-generator accuracy and AP on a dataset split.
    Eval(EvalArgs),
    /// Evaluate under a grid of blur and JPEG degradations.
    Sweep(SweepArgs),
    /// Average Fourier spectrum of a folder of images.
    Spectrum(SpectrumArgs),
    /// Show the SRM kernels and their groups.
    Filters(FiltersArgs),
    /// Dump per-image feature vectors of one expert.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root holding `<split>/<generator>/<real|fake>/`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Merge {
    Probability,
    Logit,
}

impl From<Merge> for MergeMode {
    fn from(m: Merge) -> Self {
        match m {
            Merge::Probability => MergeMode::Probability,
            Merge::Logit => MergeMode::Logit,
        }
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// How expert scores are merged.
    #[arg(long, value_enum, default_value = "probability")]
    merge: Merge,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Early-exit threshold on the running score sum; `-inf` disables early exit.
    #[arg(long, default_value = "-inf", allow_hyphen_values = true)]
    threshold: f64,
    /// Write JSON to this file, or `-` for stdout.
    #[arg(long)]
    json: Option<String>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    data: DatasetArgs,
    /// `identity`, `blur:SIGMA` or `jpeg:QUALITY`.
    #[arg(long)]
    perturb: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    data: DatasetArgs,
    /// Grid terms such as `blur=1,2,3,4 jpeg=90,80`; defaults to the full grid.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    /// Directory for sweep.csv, reports.json and plots.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Filter group 1..=5; omit for the unfiltered images.
    #[arg(long)]
    group: Option<u8>,
    /// Output PNG; a JSON sidecar with the same stem is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Analysis size in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct FiltersArgs {
    /// Kernel id 1..=30.
    #[arg(long, conflicts_with = "group")]
    id: Option<u8>,
    /// Group id 1..=5.
    #[arg(long)]
    group: Option<u8>,
    /// Kernel data file to use instead of the built-in bank.
    #[arg(long)]
    kernels: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    data: DatasetArgs,
    /// Expert 1..=6 (6 sees the unfiltered image).
    #[arg(long, default_value_t = 6)]
    expert: usize,
    /// Output JSON file, or `-` for stdout.
    #[arg(long, default_value = "-")]
    out: String,
}

fn init_logging(level: Option<&str>) {
    let filter = level
        .map(str::to_string)
        .or_else(|| std::env::var(format!("{}LOG", config::ENV_PREFIX)).ok())
        .unwrap_or_else(|| "info".into());
    env_logger::Builder::new()
        .parse_filters(&filter)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn set_workers(workers: Option<usize>) -> Outcome {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::validation(format!("workers: {e}")))?;
    }
    Ok(())
}

fn write_output(target: &str, text: &str) -> Outcome {
    if target == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Failure::runtime(format!("stdout: {e}")))
    } else {
        let path = Path::new(target);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
        }
        fs::write(path, format!("{text}\n")).map_err(|e| io_failure(path, e))
    }
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load_detector(args: &CheckpointArgs) -> Result<DetectorModel, Failure> {
    let mut det = DetectorModel::load(&args.checkpoint)?;
    det.merge = args.merge.into();
    Ok(det)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files directly inside `dir`, sorted by path.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::runtime(format!("no png/jpg images in {}", dir.display())));
    }
    Ok(paths)
}

fn merge_name(m: MergeMode) -> &'static str {
    match m {
        MergeMode::Probability => "probability",
        MergeMode::Logit => "logit",
    }
}

fn cmd_train(args: TrainArgs, workers: Option<usize>) -> Outcome {
    let mut table = match &args.config {
        Some(path) => config::read_file(path)?,
        None => toml::Table::new(),
    };
    config::apply_env(&mut table, std::env::vars())?;
    let flags = [
        ("seed", args.seed.map(|s| toml::Value::Integer(s as i64))),
        ("checkpoint_dir", args.out.map(|p| toml::Value::String(p.display().to_string()))),
        ("dataset_root", args.dataset.map(|p| toml::Value::String(p.display().to_string()))),
        ("epochs", args.epochs.map(|e| toml::Value::Integer(e as i64))),
        ("workers", workers.map(|w| toml::Value::Integer(w as i64))),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config::set(&mut table, &[key.to_string()], v)?;
        }
    }
    let cfg = config::into_train_config(table)?;
    log::info!("training into {}", cfg.checkpoint_dir.display());
    let summary = train_with_summary(&cfg)?;
    let report = json!({
        "checkpoint": summary.checkpoint,
        "checkpoint_hash": summary.checkpoint_hash,
        "epochs": summary.log,
        "train_avg_acc": summary.train_report.as_ref().map(|r| r.avg_acc),
        "train_map": summary.train_report.as_ref().and_then(|r| r.map),
        "eval_avg_acc": summary.eval_report.as_ref().map(|r| r.avg_acc),
        "eval_map": summary.eval_report.as_ref().and_then(|r| r.map),
        "config": cfg.echo(),
    });
    write_output("-", &to_json(&report))
}

fn cmd_detect(args: DetectArgs, workers: Option<usize>) -> Outcome {
    set_workers(workers)?;
    if args.threshold.is_nan() {
        return Err(Failure::validation("threshold: must not be NaN"));
    }
    let det = load_detector(&args.ckpt)?;
    let text = if args.input.is_dir() {
        let paths = list_images(&args.input)?;
        let report = det.detect_batch(&paths, args.threshold)?;
        if args.json.is_none() {
            for rec in &report.records {
                match (&rec.verdict, &rec.error) {
                    (Some(v), _) => println!("{}\t{:?}\t{:.6}", rec.path.display(), v.label, v.normalized_score),
                    (None, Some(e)) => println!("{}\terror\t{e}", rec.path.display()),
                    (None, None) => {}
                }
            }
            let s = &report.summary;
            println!("scored {}/{} (fake {}, real {}, failed {})", s.scored, s.total, s.fake, s.real, s.failed);
            return Ok(());
        }
        to_json(&json!({
            "config": {
                "command": "detect",
                "checkpoint": args.ckpt.checkpoint,
                "checkpoint_hash": det.checkpoint_hash(),
                "input": args.input,
                "threshold": threshold_text(args.threshold),
                "merge": merge_name(det.merge),
            },
            "records": report.records,
            "summary": report.summary,
        }))
    } else {
        let img = Image::open(&args.input)?;
        let verdict = det.detect(&img, args.threshold)?;
        if args.json.is_none() {
            println!("{}\t{:?}\t{:.6}", args.input.display(), verdict.label, verdict.normalized_score);
            return Ok(());
        }
        to_json(&verdict)
    };
    write_output(args.json.as_deref().unwrap_or("-"), &text)
}

fn threshold_text(t: f64) -> serde_json::Value {
    if t.is_finite() {
        json!(t)
    } else if t > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn eval_echo(command: &str, ckpt: &CheckpointArgs, det: &DetectorModel, data: &DatasetArgs) -> serde_json::Value {
    json!({
        "command": command,
        "checkpoint": ckpt.checkpoint,
        "checkpoint_hash": det.checkpoint_hash(),
        "dataset": data.dataset,
        "split": data.split,
        "merge": merge_name(det.merge),
    })
}

fn cmd_eval(args: EvalArgs, workers: Option<usize>) -> Outcome {
    set_workers(workers)?;
    let perturbation = args.perturb.as_deref().map(Perturbation::parse).transpose()?;
    let det = load_detector(&args.ckpt)?;
    let data = Dataset::load(&args.data.dataset, &args.data.split)?;
    let mut echo = eval_echo("eval", &args.ckpt, &det, &args.data);
    echo["perturb"] = json!(perturbation.map(|p| p.to_string()));
    let report = evaluate(&det, &data, perturbation, &echo)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        write_output(&out.display().to_string(), &report.to_json())?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, workers: Option<usize>) -> Outcome {
    set_workers(workers)?;
    let grid = if args.grid.is_empty() {
        SweepGrid::default()
    } else {
        SweepGrid::parse(&args.grid)?
    };
    let det = load_detector(&args.ckpt)?;
    let data = Dataset::load(&args.data.dataset, &args.data.split)?;
    let mut echo = eval_echo("sweep", &args.ckpt, &det, &args.data);
    echo["grid"] = json!(grid);
    let mut points = vec![Perturbation::Identity];
    points.extend(grid.points());
    let reports = robustness_sweep(&det, &data, &points, &echo)?;
    for r in &reports {
        let p = r.perturbation.map(|p| p.to_string()).unwrap_or_default();
        let map = r.map.map(|m| format!("{m:.2}")).unwrap_or_else(|| "n/a".into());
        println!("{p:<12} acc {:>6.2}  mAP {map:>6}", r.avg_acc);
    }
    write_sweep_artifacts(&reports, &args.out)?;
    let path = args.out.join("reports.json");
    fs::write(&path, to_json(&reports)).map_err(|e| io_failure(&path, e))?;
    log::info!("sweep artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_spectrum(args: SpectrumArgs) -> Outcome {
    let group = args
        .group
        .map(|g| FilterGroup::by_id(g).ok_or_else(|| Failure::validation(format!("group: {g} is not in 1..=5"))))
        .transpose()?;
    let paths = list_images(&args.input)?;
    let images = paths.iter().map(Image::open).collect::<Result<Vec<_>, _>>()?;
    let spectrum = average_spectrum(&images, group.as_ref(), &FilterBank::builtin(), args.size)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    spectrum.save_png(&args.out)?;
    let sidecar = args.out.with_extension("json");
    let meta = json!({
        "config": {
            "command": "spectrum",
            "input": args.input,
            "group": args.group,
            "size": args.size,
        },
        "images": paths.len(),
        "low_band_fraction": spectrum.low_band_fraction,
    });
    fs::write(&sidecar, to_json(&meta)).map_err(|e| io_failure(&sidecar, e))?;
    println!("low-band fraction {:.6} over {} images", spectrum.low_band_fraction, paths.len());
    Ok(())
}

fn cmd_filters(args: FiltersArgs) -> Outcome {
    let bank = match &args.kernels {
        Some(path) => load_kernels(path)?,
        None => FilterBank::builtin(),
    };
    let show_group = |g: &FilterGroup| {
        let ids: Vec<String> = g.kernel_ids.iter().map(u8::to_string).collect();
        println!("group {}: kernels {} ({})", g.group_id, ids.join(", "), g.description);
    };
    match (args.id, args.group) {
        (Some(id), _) => {
            let kernel = bank
                .kernel(id)
                .ok_or_else(|| Failure::validation(format!("id: {id} is not in 1..=30")))?;
            println!("kernel {id}");
            println!("{kernel}");
            if let Some(g) = FilterGroup::containing(id) {
                show_group(&g);
            }
        }
        (None, Some(gid)) => {
            let g = FilterGroup::by_id(gid).ok_or_else(|| Failure::validation(format!("group: {gid} is not in 1..=5")))?;
            show_group(&g);
            for &id in &g.kernel_ids {
                if let Some(k) = bank.kernel(id) {
                    println!("\nkernel {id}\n{k}");
                }
            }
        }
        (None, None) => FilterGroup::all().iter().for_each(show_group),
    }
    Ok(())
}

fn cmd_export(args: ExportArgs, workers: Option<usize>) -> Outcome {
    set_workers(workers)?;
    if !(1..=6).contains(&args.expert) {
        return Err(Failure::validation(format!("expert: {} is not in 1..=6", args.expert)));
    }
    let det = load_detector(&args.ckpt)?;
    let data = Dataset::load(&args.data.dataset, &args.data.split)?;
    let model = det.model();
    let mut records = Vec::with_capacity(data.len());
    for s in &data.samples {
        let views = model.views(&s.image, det.bank())?;
        let features = model.extract_features(&views[args.expert - 1], args.expert)?;
        records.push(json!({
            "path": s.path,
            "generator": s.generator,
            "label": s.label,
            "features": features.to_vec(),
        }));
    }
    let mut echo = eval_echo("export-features", &args.ckpt, &det, &args.data);
    echo["expert"] = json!(args.expert);
    write_output(&args.out, &to_json(&json!({ "config": echo, "records": records })))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.log_level.as_deref());
    let workers = cli.workers;
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, workers),
        Command::Detect(a) => cmd_detect(a, workers),
        Command::Eval(a) => cmd_eval(a, workers),
        Command::Sweep(a) => cmd_sweep(a, workers),
        Command::Spectrum(a) => set_workers(workers).and_then(|_| cmd_spectrum(a)),
        Command::Filters(a) => cmd_filters(a),
        Command::ExportFeatures(a) => cmd_export(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

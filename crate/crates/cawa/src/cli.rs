//! Command-line surface: train, sweep, eval, hist, export.
//!
//! Configuration comes from an optional JSON document mirroring
//! [`TrainConfig`] field names; kebab-case flags override file values.
//! Artifacts are written atomically (temp file + rename) and every training
//! run leaves a manifest that reconstructs it. Exit codes: 0 ok, 2
//! usage/config, 3 IO/format, 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{
    export_container, histogram, import_container, quantized_table, write_histogram_csv,
};
use crate::entropy::{rate_bits, DistKind, QuantSpec, Quantizer};
use crate::error::{Error, Result};
use crate::grid::FeatureTable;
use crate::objective::LambdaSchedule;
use crate::ppm::load_ppm;
use crate::render::AnalyticScene;
use crate::trainer::{
    holdout_psnr, load_checkpoint, write_metrics_csv, Model, TaskData, TaskKind, TrainConfig,
    Trainer,
};

#[derive(Parser)]
#[command(
    name = "cawa",
    version,
    about = "Compression-aware neural fields: train, sweep, eval, hist, export"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, metrics CSV and manifest.
    Train(TrainArgs),
    /// Run a rate-distortion sweep and write a CSV table plus SVG scatter.
    Sweep(SweepArgs),
    /// Report held-out PSNR of a checkpoint, optionally decoding a container.
    Eval(EvalArgs),
    /// Dump the quantization-index histogram of a checkpoint's table.
    Hist(HistArgs),
    /// Quantize and compress a checkpoint's feature table into a container.
    Export(ExportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Image,
    Volume,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Laplace,
    Cauchy,
}

impl From<DistArg> for DistKind {
    fn from(d: DistArg) -> DistKind {
        match d {
            DistArg::Laplace => DistKind::Laplace,
            DistArg::Cauchy => DistKind::Cauchy,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Fixed,
    Adaptive,
    Hybrid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QuantizerArg {
    MidRise,
    MidTread,
}

impl From<QuantizerArg> for Quantizer {
    fn from(q: QuantizerArg) -> Quantizer {
        match q {
            QuantizerArg::MidRise => Quantizer::MidRise,
            QuantizerArg::MidTread => Quantizer::MidTread,
        }
    }
}

/// Config file plus the flag overrides shared by train and sweep.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config mirroring the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task override; switching also retargets the grid dimension.
    #[arg(long)]
    task: Option<TaskArg>,
    /// Target PPM (P6) image for the image task; synthetic target if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Side length of the synthetic target (image) or views (volume).
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Number of training views for the volume task.
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long)]
    dist: Option<DistArg>,
    #[arg(long)]
    delta: Option<f64>,
    /// Schedule mode; pairs with --lambda (and --hybrid-threshold).
    #[arg(long)]
    lambda_mode: Option<ModeArg>,
    /// Rate weight: lambda for fixed/hybrid, lambda-bar for adaptive.
    #[arg(long)]
    lambda: Option<f64>,
    /// Distortion level that flips the hybrid schedule to its fixed lambda.
    #[arg(long, default_value_t = 1e-3)]
    hybrid_threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving checkpoint.cawc, metrics.csv and manifest.json.
    #[arg(long, default_value = "run")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Rate weights to sweep, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    /// Schedule modes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![ModeArg::Fixed], value_enum)]
    modes: Vec<ModeArg>,
    /// Distributions to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![DistArg::Laplace], value_enum)]
    dists: Vec<DistArg>,
    #[arg(long, default_value = "sweep")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Compressed feature container; when given, its decoded table replaces
    /// the checkpoint's table (the grids must agree).
    #[arg(long)]
    container: Option<PathBuf>,
    /// Target PPM image for the image task; synthetic target if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Volume eval fidelity override; the checkpoint's value when absent.
    #[arg(long)]
    samples_per_ray: Option<usize>,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    delta: f64,
    /// Bin placement; the checkpoint distribution's default when absent.
    #[arg(long)]
    quantizer: Option<QuantizerArg>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Quantization step; the checkpoint config's value when absent.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    quantizer: Option<QuantizerArg>,
}

/// Parses argv and runs one command, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; clap picks the right code.
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = check_thread_cap().and_then(|()| match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Hist(a) => cmd_hist(a),
        Cmd::Export(a) => cmd_export(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            i32::from(e.exit_code())
        }
    }
}

/// Reference mode runs everything on one worker; the env var is still
/// validated so misconfigured pipelines fail loudly.
fn check_thread_cap() -> Result<()> {
    match std::env::var("CAWA_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::Config(format!(
                "CAWA_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

// ---------------------------------------------------------------------------
// Config resolution and run manifests
// ---------------------------------------------------------------------------

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// File config overlaid with flag overrides, then validated.
fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(task) = args.task {
        c.task = match task {
            TaskArg::Image => TaskKind::Image,
            TaskArg::Volume => TaskKind::Volume,
        };
        c.grid.dims = match c.task {
            TaskKind::Image => 2,
            TaskKind::Volume => 3,
        };
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        c.iterations = iterations;
    }
    if let Some(batch) = args.batch {
        c.batch = batch;
    }
    if let Some(samples) = args.samples_per_ray {
        c.samples_per_ray = samples;
    }
    if let Some(dist) = args.dist {
        c.dist = dist.into();
    }
    if let Some(delta) = args.delta {
        c.delta = delta;
    }
    if let Some(mode) = args.lambda_mode {
        let weight = args.lambda.ok_or_else(|| {
            Error::Usage("--lambda-mode needs --lambda".into())
        })?;
        c.schedule = schedule_for(mode, weight, args.hybrid_threshold);
    } else if let Some(weight) = args.lambda {
        c.schedule = match c.schedule {
            LambdaSchedule::Fixed { .. } => LambdaSchedule::Fixed { lambda: weight },
            LambdaSchedule::Adaptive { .. } => LambdaSchedule::Adaptive { lambda_bar: weight },
            LambdaSchedule::Hybrid { threshold, .. } => {
                LambdaSchedule::Hybrid { lambda: weight, threshold }
            }
        };
    }
    c.validate()?;
    Ok(c)
}

fn schedule_for(mode: ModeArg, weight: f64, threshold: f64) -> LambdaSchedule {
    match mode {
        ModeArg::Fixed => LambdaSchedule::Fixed { lambda: weight },
        ModeArg::Adaptive => LambdaSchedule::Adaptive { lambda_bar: weight },
        ModeArg::Hybrid => LambdaSchedule::Hybrid { lambda: weight, threshold },
    }
}

/// Builds the task data a config describes and a stable description of it.
fn resolve_data(config: &TrainConfig, args: &ConfigArgs) -> Result<(TaskData, String)> {
    match config.task {
        TaskKind::Image => match &args.input {
            Some(path) => {
                let img = load_ppm(path)?;
                Ok((TaskData::image(img), format!("ppm:{}", path.display())))
            }
            None => Ok((
                TaskData::synthetic_image(args.size, args.size),
                format!("synthetic_image:{}x{}", args.size, args.size),
            )),
        },
        TaskKind::Volume => {
            let data =
                TaskData::synthetic_volume(AnalyticScene::default_sphere(), args.views, args.size)?;
            Ok((data, format!("synthetic_volume:{}views:{}px", args.views, args.size)))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reconstruct a run: resolved config, seed, content
/// hashes of file inputs, the data description and the artifact paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub data: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn input_hashes(args: &ConfigArgs) -> Result<Vec<InputHash>> {
    let mut out = Vec::new();
    for path in [&args.config, &args.input].into_iter().flatten() {
        out.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
    }
    Ok(out)
}

/// Writes through a temp file in the same directory, then renames.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir
        .unwrap_or(Path::new("."))
        .join(format!(".{}.tmp", file_name.to_string_lossy()));
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, |w| {
        w.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = resolve_config(&args.config)?;
    let (data, data_desc) = resolve_data(&config, &args.config)?;
    let inputs = input_hashes(&args.config)?;

    let mut trainer = Trainer::new(config.clone(), data)?;
    let outcome = trainer.run()?;

    let dir = &args.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let checkpoint = dir.join("checkpoint.cawc");
    let metrics = dir.join("metrics.csv");
    let manifest_path = dir.join("manifest.json");

    write_atomic(&checkpoint, |w| crate::trainer::write_checkpoint(w, &config, trainer.model()))?;
    write_atomic(&metrics, |w| {
        write_metrics_csv(w, &outcome.metrics).map_err(|e| Error::io(&metrics, e))
    })?;
    let manifest = RunManifest {
        command: "train".into(),
        seed: config.seed,
        config,
        data: data_desc,
        inputs,
        outputs: vec![
            checkpoint.display().to_string(),
            metrics.display().to_string(),
        ],
    };
    write_json_atomic(&manifest_path, &manifest)?;

    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "trained {} steps: loss {:.6e}, rate {:.4} bits/feature, holdout psnr {:.3} dB ({:.1}s)",
        last.step, last.loss, last.rate_bits, outcome.final_psnr, outcome.train_seconds
    );
    println!("wrote {}", manifest_path.display());
    Ok(())
}

/// One finished sweep run.
struct SweepRow {
    dist: DistKind,
    mode: &'static str,
    lambda: f64,
    outcome: Result<(f64, u64, f64, f64)>,
}

pub const SWEEP_HEADER: &str =
    "dist,mode,lambda,psnr_db,compressed_bytes,rate_bits_per_feature,train_seconds";

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Fixed => "fixed",
        ModeArg::Adaptive => "adaptive",
        ModeArg::Hybrid => "hybrid",
    }
}

fn dist_name(dist: DistKind) -> &'static str {
    match dist {
        DistKind::Laplace => "laplace",
        DistKind::Cauchy => "cauchy",
    }
}

/// Trains one sweep point and measures it end to end: the reported PSNR
/// comes from a table that was exported, re-imported and decoded.
fn sweep_run(config: &TrainConfig, data: &TaskData) -> Result<(f64, u64, f64, f64)> {
    let mut trainer = Trainer::new(config.clone(), data.clone())?;
    let outcome = trainer.run()?;
    let quant = config.quant();
    let mut buf = Vec::new();
    let bytes = export_container(&mut buf, &trainer.model().table, &trainer.model().dist, &quant)?;
    let (imported, _) = import_container(&mut &buf[..])?;
    let psnr_db = trainer.eval_psnr_with_table(Some(&imported));
    let rate = rate_bits(imported.values(), &trainer.model().dist, quant.delta);
    Ok((psnr_db, bytes, rate, outcome.train_seconds))
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.lambdas.is_empty() {
        return Err(Error::Usage("sweep needs at least one --lambdas value".into()));
    }
    let base = resolve_config(&args.config)?;
    let (data, data_desc) = resolve_data(&base, &args.config)?;
    let inputs = input_hashes(&args.config)?;

    let mut rows = Vec::new();
    for &dist in &args.dists {
        for &mode in &args.modes {
            for &lambda in &args.lambdas {
                let mut config = base.clone();
                config.dist = dist.into();
                config.schedule = schedule_for(mode, lambda, args.config.hybrid_threshold);
                let label = format!("{} {} lambda {lambda}", dist_name(config.dist), mode_name(mode));
                let outcome = config.validate().and_then(|()| sweep_run(&config, &data));
                match &outcome {
                    Ok((psnr, bytes, rate, secs)) => eprintln!(
                        "sweep {label}: psnr {psnr:.3} dB, {bytes} bytes, {rate:.4} bits/feature, {secs:.1}s"
                    ),
                    Err(e) => eprintln!("sweep {label}: failed: {e}"),
                }
                rows.push(SweepRow {
                    dist: dist.into(),
                    mode: mode_name(mode),
                    lambda,
                    outcome,
                });
            }
        }
    }

    let dir = &args.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("rd.csv");
    let svg_path = dir.join("rd.svg");
    write_atomic(&csv_path, |w| {
        writeln!(w, "{SWEEP_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        for row in &rows {
            let line = match &row.outcome {
                Ok((psnr, bytes, rate, secs)) => format!(
                    "{},{},{},{},{},{},{}",
                    dist_name(row.dist), row.mode, row.lambda, psnr, bytes, rate, secs
                ),
                Err(_) => format!(
                    "{},{},{},failed,,,",
                    dist_name(row.dist), row.mode, row.lambda
                ),
            };
            writeln!(w, "{line}").map_err(|e| Error::io(&csv_path, e))?;
        }
        Ok(())
    })?;
    write_atomic(&svg_path, |w| {
        let points: Vec<SvgSeriesPoint> = rows
            .iter()
            .filter_map(|r| {
                r.outcome.as_ref().ok().map(|&(psnr, bytes, _, _)| SvgSeriesPoint {
                    series: format!("{} {}", dist_name(r.dist), r.mode),
                    bytes,
                    psnr,
                })
            })
            .collect();
        w.write_all(render_rd_svg(&points).as_bytes()).map_err(|e| Error::io(&svg_path, e))
    })?;
    let manifest = RunManifest {
        command: "sweep".into(),
        seed: base.seed,
        config: base,
        data: data_desc,
        inputs,
        outputs: vec![csv_path.display().to_string(), svg_path.display().to_string()],
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (mut config, model) = load_checkpoint(&args.checkpoint)?;
    if let Some(samples) = args.samples_per_ray {
        config.samples_per_ray = samples;
        config.validate()?;
    }
    let data_args = ConfigArgs {
        config: None,
        task: None,
        input: args.input.clone(),
        size: args.size,
        views: args.views,
        seed: None,
        iterations: None,
        batch: None,
        samples_per_ray: None,
        dist: None,
        delta: None,
        lambda_mode: None,
        lambda: None,
        hybrid_threshold: 1e-3,
    };
    let (data, data_desc) = resolve_data(&config, &data_args)?;

    let table = match &args.container {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (table, _) = import_container(&mut std::io::BufReader::new(file))?;
            check_grid_match(&model, &table)?;
            Some(table)
        }
        None => None,
    };
    let psnr = holdout_psnr(&config, &model, &data, table.as_ref());
    let source = match &args.container {
        Some(p) => format!("container {}", p.display()),
        None => "checkpoint table".into(),
    };
    println!("psnr_db={psnr:.6} ({source}, data {data_desc})");
    Ok(())
}

/// The container's grid must match the checkpoint's; mismatches name the
/// offending fields.
fn check_grid_match(model: &Model, table: &FeatureTable) -> Result<()> {
    let a = model.table.config();
    let b = table.config();
    let mut wrong = Vec::new();
    if a.dims != b.dims {
        wrong.push(format!("dims {} vs {}", a.dims, b.dims));
    }
    if a.levels != b.levels {
        wrong.push(format!("levels {} vs {}", a.levels, b.levels));
    }
    if a.features_per_entry != b.features_per_entry {
        wrong.push(format!("features_per_entry {} vs {}", a.features_per_entry, b.features_per_entry));
    }
    if a.log2_table_size != b.log2_table_size {
        wrong.push(format!("log2_table_size {} vs {}", a.log2_table_size, b.log2_table_size));
    }
    if a.n_min != b.n_min {
        wrong.push(format!("n_min {} vs {}", a.n_min, b.n_min));
    }
    if a.n_max != b.n_max {
        wrong.push(format!("n_max {} vs {}", a.n_max, b.n_max));
    }
    if wrong.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!(
            "container grid disagrees with checkpoint: {}",
            wrong.join(", ")
        )))
    }
}

fn cmd_hist(args: HistArgs) -> Result<()> {
    if !(args.delta.is_finite() && args.delta > 0.0) {
        return Err(Error::Usage(format!("--delta must be > 0, got {}", args.delta)));
    }
    let (config, model) = load_checkpoint(&args.checkpoint)?;
    let quantizer = args
        .quantizer
        .map(Quantizer::from)
        .unwrap_or_else(|| config.dist.default_quantizer());
    let quant = QuantSpec::new(args.delta, quantizer)?;
    let hist = histogram(&model.table, &quant)?;
    match &args.output {
        Some(path) => write_atomic(path, |w| {
            write_histogram_csv(w, &hist).map_err(|e| Error::io(path, e))
        })?,
        None => {
            let mut out = Vec::new();
            write_histogram_csv(&mut out, &hist)
                .map_err(|e| Error::Format(format!("histogram: {e}")))?;
            print!("{}", String::from_utf8_lossy(&out));
        }
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (config, model) = load_checkpoint(&args.checkpoint)?;
    let mut quant = config.quant();
    if let Some(delta) = args.delta {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Usage(format!("--delta must be > 0, got {delta}")));
        }
        quant.delta = delta;
    }
    if let Some(q) = args.quantizer {
        quant.quantizer = q.into();
    }
    let mut bytes = 0;
    write_atomic(&args.output, |w| {
        bytes = export_container(w, &model.table, &model.dist, &quant)?;
        Ok(())
    })?;
    let quantized = quantized_table(&model.table, &quant)?;
    let rate = rate_bits(quantized.values(), &model.dist, quant.delta);
    println!(
        "wrote {} ({bytes} bytes, {:.4} bits/feature under the model)",
        args.output.display(),
        rate
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG scatter
// ---------------------------------------------------------------------------

struct SvgSeriesPoint {
    series: String,
    bytes: u64,
    psnr: f64,
}

const SVG_COLORS: [&str; 6] = ["#1b6ca8", "#c23b22", "#2e8540", "#8a4baf", "#b8860b", "#444444"];

/// Minimal semi-log rate-distortion scatter: log-scaled size axis, one
/// polyline plus markers per series.
fn render_rd_svg(points: &[SvgSeriesPoint]) -> String {
    let (w, h) = (640.0, 440.0);
    let (l, r, t, b) = (70.0, 20.0, 20.0, 50.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    if points.is_empty() {
        svg.push_str("<text x=\"320\" y=\"220\" text-anchor=\"middle\">no successful runs</text>\n</svg>\n");
        return svg;
    }

    let log = |bytes: u64| (bytes.max(1) as f64).log10();
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for p in points {
        x0 = x0.min(log(p.bytes));
        x1 = x1.max(log(p.bytes));
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |v: f64| l + (v - x0) / (x1 - x0) * (w - l - r);
    let sy = |v: f64| h - b - (v - y0) / (y1 - y0) * (h - t - b);

    // Axes with decade ticks on x and 5 linear ticks on y.
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - b,
        w - r,
        h - b
    ));
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - b
    ));
    for dec in (x0.floor() as i64)..=(x1.ceil() as i64) {
        let v = dec as f64;
        if v < x0 - 1e-9 || v > x1 + 1e-9 {
            continue;
        }
        let x = sx(v);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - b,
            h - b + 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">1e{dec}</text>\n",
            h - b + 20.0
        ));
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"black\"/>\n",
            l - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">{v:.1}</text>\n",
            l - 10.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">compressed size (bytes, log)</text>\n",
        (l + w - r) / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 16 {})\">PSNR (dB)</text>\n",
        (t + h - b) / 2.0,
        (t + h - b) / 2.0
    ));

    // One polyline per series, points sorted by size.
    let mut series: Vec<&str> = Vec::new();
    for p in points {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    for (si, name) in series.iter().enumerate() {
        let color = SVG_COLORS[si % SVG_COLORS.len()];
        let mut pts: Vec<&SvgSeriesPoint> =
            points.iter().filter(|p| p.series == *name).collect();
        pts.sort_by_key(|p| p.bytes);
        let path: Vec<String> =
            pts.iter().map(|p| format!("{:.2},{:.2}", sx(log(p.bytes)), sy(p.psnr))).collect();
        if path.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
        }
        for p in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>\n",
                sx(log(p.bytes)),
                sy(p.psnr)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            w - r - 150.0,
            t + 16.0 + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_scatter_contains_axes_points_and_series() {
        let points = vec![
            SvgSeriesPoint { series: "laplace fixed".into(), bytes: 1000, psnr: 30.0 },
            SvgSeriesPoint { series: "laplace fixed".into(), bytes: 400, psnr: 27.5 },
            SvgSeriesPoint { series: "cauchy fixed".into(), bytes: 600, psnr: 28.2 },
        ];
        let svg = render_rd_svg(&points);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polyline"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("PSNR (dB)"));
        assert!(svg.contains("1e3"));
        assert!(svg.contains("laplace fixed"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn svg_scatter_handles_empty_input() {
        let svg = render_rd_svg(&[]);
        assert!(svg.contains("no successful runs"));
    }

    #[test]
    fn thread_cap_validation() {
        // Only exercises the parser, not the env var itself.
        for (v, ok) in [("1", true), ("8", true), ("0", false), ("-2", false), ("abc", false)] {
            let parsed = v.trim().parse::<usize>();
            assert_eq!(matches!(parsed, Ok(n) if n >= 1), ok, "{v}");
        }
    }

    #[test]
    fn config_override_precedence() {
        let args = ConfigArgs {
            config: None,
            task: Some(TaskArg::Volume),
            input: None,
            size: 32,
            views: 4,
            seed: Some(99),
            iterations: Some(10),
            batch: Some(16),
            samples_per_ray: Some(8),
            dist: Some(DistArg::Cauchy),
            delta: None,
            lambda_mode: Some(ModeArg::Adaptive),
            lambda: Some(2.0),
            hybrid_threshold: 1e-3,
        };
        let c = resolve_config(&args).unwrap();
        assert_eq!(c.task, TaskKind::Volume);
        assert_eq!(c.grid.dims, 3);
        assert_eq!(c.seed, 99);
        assert_eq!(c.dist, DistKind::Cauchy);
        assert_eq!(c.schedule, LambdaSchedule::Adaptive { lambda_bar: 2.0 });
    }

    #[test]
    fn lambda_mode_without_lambda_is_usage_error() {
        let args = ConfigArgs {
            config: None,
            task: None,
            input: None,
            size: 32,
            views: 4,
            seed: None,
            iterations: None,
            batch: None,
            samples_per_ray: None,
            dist: None,
            delta: None,
            lambda_mode: Some(ModeArg::Fixed),
            lambda: None,
            hybrid_threshold: 1e-3,
        };
        let err = resolve_config(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

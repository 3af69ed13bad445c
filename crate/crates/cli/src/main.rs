use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fieldline::backend::{read_rlej, write_rlej, DetectionSet, FieldInstance};
use fieldline::datagen::{
    dataset_stats, extract_patches, rasterize_parcels, read_manifest, read_parcels, split_manifest,
    write_manifest, write_patch_samples, PatchExtractionConfig,
};
use fieldline::eval::{bench, evaluate, LatencyStats};
use fieldline::pipeline::{delineate_file, PipelineConfig, Threads};
use fieldline::raster::{read_geo_sidecar, read_png, GeoTransform};
use fieldline::vector::write_geojson;
use fieldline::Error;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

const THREADS_ENV: &str = "FIELDLINE_THREADS";

#[derive(Parser)]
#[command(name = "fieldline", version, about = "Field-boundary delineation and evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment rasters and write field polygons as GeoJSON.
    Delineate(DelineateArgs),
    /// Score predicted .rlej files against a manifest's annotations.
    Evaluate(EvaluateArgs),
    /// Burn parcel polygons into an instance .rlej.
    Rasterize(RasterizeArgs),
    /// Cut a scene and its annotations into patches plus a manifest.
    Patches(PatchesArgs),
    /// Summarize a dataset manifest.
    Stats(StatsArgs),
    /// Assign manifest entries to train/test by spatial block.
    Split(SplitArgs),
    /// Time the end-to-end pipeline over a list of rasters.
    Bench(BenchArgs),
}

/// Pipeline settings shared by `delineate`, `evaluate` and `bench`.
#[derive(Args)]
struct PipelineFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tile_px: Option<u32>,
    #[arg(long)]
    overlap_px: Option<u32>,
    #[arg(long)]
    simplify_tolerance_px: Option<f64>,
    /// Worker count or "auto"; overrides FIELDLINE_THREADS.
    #[arg(long)]
    threads: Option<String>,
    /// Run an external segmentation program instead of the baseline.
    #[arg(long, num_args = 1.., allow_hyphen_values = true, value_name = "CMD")]
    exec: Option<Vec<String>>,
}

#[derive(Args)]
struct DelineateArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Output GeoJSON file (single input) or directory.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the stitched instances as .rlej next to each GeoJSON.
    #[arg(long)]
    rlej: bool,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Ground-truth manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<image stem>.rlej` predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    boundary_thickness_px: Option<u32>,
    #[arg(long)]
    max_detections_per_image: Option<usize>,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// GeoJSON parcels.
    #[arg(long)]
    parcels: PathBuf,
    /// Raster whose extent (and geo sidecar, if any) defines the grid.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Geo sidecar to use when no reference raster is given.
    #[arg(long)]
    geo: Option<PathBuf>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PatchesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    /// Scene-level instance annotations (.rlej).
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "default")]
    region: String,
    #[arg(long)]
    patch_size_px: Option<u32>,
    #[arg(long)]
    stride_px: Option<u32>,
    #[arg(long)]
    min_field_px: Option<u64>,
    /// Keep patches without any annotation.
    #[arg(long)]
    keep_empty: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    block_px: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Leading runs excluded from the statistics.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RasterizeConfig {
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsConfig {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    test_fraction: f64,
    block_px: u32,
    seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            block_px: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug)]
struct CliError {
    code: &'static str,
    detail: String,
}

impl CliError {
    fn new(code: &'static str, detail: impl Into<String>) -> Self {
        CliError {
            code,
            detail: detail.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::EmptyBenchmark => CliError::new("BENCH", "empty"),
            e => CliError::new(e.code(), e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn manifest_error(e: Error) -> CliError {
    CliError::new("MANIFEST", e.to_string())
}

/// Recursively overlays `over` onto `base`. A `backend` override replaces
/// the whole backend choice.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if k == "backend" {
                    b.insert(k, v);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set<T: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).expect("flag value serializes"));
    }
}

/// Config file values overlaid with flag overrides, then deserialized.
fn resolve_config<T: DeserializeOwned>(file: Option<&Path>, overrides: Map<String, Value>) -> CliResult<T> {
    let mut value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new("IO", format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new("CONFIG", format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !value.is_object() {
        return Err(CliError::new("CONFIG", "config must be a JSON object"));
    }
    merge(&mut value, Value::Object(overrides));
    serde_json::from_value(value).map_err(|e| CliError::new("CONFIG", e.to_string()))
}

fn parse_threads(s: &str) -> CliResult<Value> {
    if s == "auto" {
        return Ok(Value::from("auto"));
    }
    s.parse::<usize>()
        .map(Value::from)
        .map_err(|_| CliError::new("CONFIG", format!("threads must be an integer or \"auto\", got {s:?}")))
}

fn pipeline_overrides(flags: &PipelineFlags) -> CliResult<Map<String, Value>> {
    let mut m = Map::new();
    set(&mut m, "tile_px", flags.tile_px);
    set(&mut m, "overlap_px", flags.overlap_px);
    set(&mut m, "simplify_tolerance_px", flags.simplify_tolerance_px);
    if let Some(cmd) = &flags.exec {
        m.insert("backend".into(), serde_json::json!({ "exec": cmd }));
    }
    let threads = match &flags.threads {
        Some(t) => Some(t.clone()),
        None => std::env::var(THREADS_ENV).ok(),
    };
    if let Some(t) = threads {
        m.insert("threads".into(), parse_threads(&t)?);
    }
    Ok(m)
}

fn resolve_pipeline(flags: &PipelineFlags, extra: Map<String, Value>) -> CliResult<PipelineConfig> {
    let mut m = pipeline_overrides(flags)?;
    m.extend(extra);
    let cfg: PipelineConfig = resolve_config(flags.config.as_deref(), m)?;
    cfg.validate()?;
    Ok(cfg)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new("JSON", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::new("IO", format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new("IO", format!("{}: {e}", dir.display())))
}

fn cmd_delineate(args: DelineateArgs) -> CliResult<()> {
    let cfg = resolve_pipeline(&args.pipeline, Map::new())?;
    let backend = cfg.backend.build()?;
    let single_file = args.inputs.len() == 1 && !args.output.is_dir();
    if !single_file {
        create_dir(&args.output)?;
    }
    for input in &args.inputs {
        let out = if single_file {
            args.output.clone()
        } else {
            args.output.join(format!("{}.geojson", file_stem(input)))
        };
        let result = delineate_file(input, backend.as_ref(), &cfg)?;
        write_geojson(&out, &result.geojson)?;
        if args.rlej {
            write_rlej(&out.with_extension("rlej"), &result.detections)?;
        }
        info!("{}: {} fields -> {}", input.display(), result.polygons.len(), out.display());
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let mut eval = Map::new();
    set(&mut eval, "boundary_thickness_px", args.boundary_thickness_px);
    set(&mut eval, "max_detections_per_image", args.max_detections_per_image);
    let mut extra = Map::new();
    if !eval.is_empty() {
        extra.insert("eval".into(), Value::Object(eval));
    }
    let cfg = resolve_pipeline(&args.pipeline, extra)?;
    let manifest = read_manifest(&args.manifest).map_err(manifest_error)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut gts = Vec::with_capacity(manifest.entries.len());
    let mut preds = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let gt = read_rlej(&base.join(&entry.annotation_path))?;
        let pred_path = args.pred_dir.join(format!("{}.rlej", file_stem(&entry.image_path)));
        let pred = if pred_path.exists() {
            read_rlej(&pred_path)?
        } else {
            warn!("{}: no prediction, counted as empty", pred_path.display());
            DetectionSet::empty(gt.width, gt.height)
        };
        gts.push(gt);
        preds.push(pred);
    }
    let report = evaluate(&gts, &preds, &cfg.eval)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    println!("mAP@0.5={:.3} mAP@0.5:0.95={:.3}", report.map50, report.map50_95);
    Ok(())
}

fn cmd_rasterize(args: RasterizeArgs) -> CliResult<()> {
    let mut m = Map::new();
    set(&mut m, "width", args.width);
    set(&mut m, "height", args.height);
    let cfg: RasterizeConfig = resolve_config(args.config.as_deref(), m)?;
    let parcels = read_parcels(&args.parcels)?;
    let (width, height, geo): (u32, u32, Option<GeoTransform>) = match &args.reference {
        Some(r) => {
            let patch = read_png(r)?;
            (patch.width(), patch.height(), patch.geo().cloned())
        }
        None => {
            let (Some(w), Some(h)) = (cfg.width, cfg.height) else {
                return Err(CliError::new("CONFIG", "need --reference or both --width and --height"));
            };
            let geo = args.geo.as_deref().map(read_geo_sidecar).transpose()?;
            (w, h, geo)
        }
    };
    let raster = rasterize_parcels(&parcels, geo.as_ref(), width, height)?;
    for w in &raster.warnings {
        warn!(
            "parcels {} and {} overlap on {} px; kept in parcel {}",
            w.winner, w.loser, w.pixels, w.winner
        );
    }
    let dets = DetectionSet {
        width,
        height,
        instances: raster
            .masks
            .into_iter()
            .map(|(i, mask)| FieldInstance {
                id: i as u64,
                mask,
                score: None,
            })
            .collect(),
    };
    write_rlej(&args.output, &dets)?;
    info!("{} of {} parcels rasterized", dets.instances.len(), parcels.len());
    Ok(())
}

fn cmd_patches(args: PatchesArgs) -> CliResult<()> {
    let mut m = Map::new();
    set(&mut m, "patch_size_px", args.patch_size_px);
    set(&mut m, "stride_px", args.stride_px);
    set(&mut m, "min_field_px", args.min_field_px);
    if args.keep_empty {
        m.insert("drop_empty".into(), Value::Bool(false));
    }
    let cfg: PatchExtractionConfig = resolve_config(args.config.as_deref(), m)?;
    let scene = read_png(&args.scene)?;
    let annotations = read_rlej(&args.annotations)?;
    let masks: Vec<_> = annotations.instances.into_iter().map(|i| i.mask).collect();
    let samples = extract_patches(&scene, &masks, &cfg)?;
    let entries = write_patch_samples(&samples, &args.out_dir, &file_stem(&args.scene), &args.region)?;
    write_manifest(&args.out_dir.join("manifest.jsonl"), &entries)?;
    println!("{} patches written to {}", entries.len(), args.out_dir.display());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> CliResult<()> {
    let _: StatsConfig = resolve_config(args.config.as_deref(), Map::new())?;
    let manifest = read_manifest(&args.manifest).map_err(manifest_error)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let stats = dataset_stats(&manifest, base);
    for e in &stats.errors {
        warn!("{}: {}", e.annotation_path.display(), e.error);
    }
    match &args.output {
        Some(path) => write_json(path, &stats)?,
        None => println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize")),
    }
    Ok(())
}

fn cmd_split(args: SplitArgs) -> CliResult<()> {
    let mut m = Map::new();
    set(&mut m, "test_fraction", args.test_fraction);
    set(&mut m, "block_px", args.block_px);
    set(&mut m, "seed", args.seed);
    let cfg: SplitConfig = resolve_config(args.config.as_deref(), m)?;
    let manifest = read_manifest(&args.manifest).map_err(manifest_error)?;
    let outcome = split_manifest(&manifest.entries, cfg.test_fraction, cfg.seed, cfg.block_px)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    write_manifest(&args.output, &outcome.manifest.entries)?;
    let test = outcome
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == fieldline::datagen::Split::Test)
        .count();
    println!("train={} test={test}", outcome.manifest.entries.len() - test);
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    config: Value,
    warmup: usize,
    inputs: usize,
    latency_ms: LatencyStats,
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    if args.inputs.is_empty() {
        return Err(CliError::new("BENCH", "empty"));
    }
    let cfg = resolve_pipeline(&args.pipeline, Map::new())?;
    let backend = cfg.backend.build()?;
    let stats = bench(&args.inputs, args.warmup, |p| {
        delineate_file(p, backend.as_ref(), &cfg).map(|_| ())
    })?;
    if let Some(path) = &args.report {
        // timings do depend on the worker count, so record the resolved value
        let mut echoed = cfg.clone();
        echoed.threads = Threads::Count(cfg.threads.resolve());
        write_json(
            path,
            &BenchReport {
                config: echoed.to_json(),
                warmup: args.warmup,
                inputs: args.inputs.len(),
                latency_ms: stats,
            },
        )?;
    }
    println!(
        "mean={:.2}ms p50={:.2}ms p95={:.2}ms n={}",
        stats.mean, stats.p50, stats.p95, stats.samples
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Delineate(a) => cmd_delineate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Rasterize(a) => cmd_rasterize(a),
        Command::Patches(a) => cmd_patches(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Split(a) => cmd_split(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("E:{}:{}", e.code, e.detail.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

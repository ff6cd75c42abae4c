//! `ipmix` command-line front end.
//!
//! Exit codes: 0 ok, 1 usage, 2 I/O or codec failure, 3 configuration or
//! parameter error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ipmix::bench::run_bench;
use ipmix::dataset::{run_augment, write_mixing_set, RunConfig, WORKERS_ENV};
use ipmix::metrics::{
    aupr_from_log, clean_error, mce, mfr, rms_calibration, BaselineErrors, BaselineFlipRates, MetricReport,
    PredictionLog,
};
use ipmix::mixer::MixOperator;
use ipmix::ops::apply_named;
use ipmix::pipeline::{preview_grid, Framework, MethodPolicy};
use ipmix::{build_mixing_set, decode, encode_png, Augmenter, Error, SeededRng};

#[derive(Parser)]
#[command(name = "ipmix", version, about = "IPMix augmentation, fractal mixing sets and robustness metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural mixing set as numbered PNGs plus a manifest.
    FractalGen(FractalGenArgs),
    /// Augment every image in a directory tree.
    Augment(AugmentArgs),
    /// Render a single op, or a grid of augmentations, for inspection.
    Preview(PreviewArgs),
    /// Compute a robustness or calibration metric from a prediction log.
    Metrics(MetricsArgs),
    /// Measure augmentation throughput against a decode+encode baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FractalGenArgs {
    #[arg(long, default_value_t = 100)]
    n_escape: usize,
    #[arg(long, default_value_t = 100)]
    n_ifs: usize,
    /// Render size as HxW.
    #[arg(long, default_value = "128x128", value_parser = parse_dims)]
    size: (usize, usize),
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra images to include, center-cropped and resized.
    #[arg(long)]
    external: Option<PathBuf>,
}

/// Engine settings shared by `augment`, `preview` and `bench`; each flag
/// overrides the matching key of `--config`.
#[derive(Args, Clone)]
struct EngineArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_framework)]
    framework: Option<Framework>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated patch sides, e.g. 4,8,16,32.
    #[arg(long, value_delimiter = ',')]
    patch_sizes: Option<Vec<usize>>,
    /// Comma-separated operators: addition, multiplication, random_pixel, random_element, convex.
    #[arg(long, value_delimiter = ',', value_parser = parse_mix_op)]
    mix_ops: Option<Vec<MixOperator>>,
    #[arg(long)]
    no_scar: bool,
    #[arg(long)]
    fractal_prob: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mixing-set directory; a set is generated from the seed when absent.
    #[arg(long)]
    fractals: Option<PathBuf>,
    #[arg(long)]
    n_fractals: Option<usize>,
    #[arg(long)]
    fractal_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Uniform,
    ImageOnly,
    POnly,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render one op (e.g. rotate) instead of a grid.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    strength: f64,
    /// Grid shape as ROWSxCOLS.
    #[arg(long, default_value = "4x4", value_parser = parse_dims)]
    grid: (usize, usize),
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricKind {
    Clean,
    Mce,
    Rms,
    Mfr,
    Aupr,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, value_enum)]
    kind: MetricKind,
    #[arg(long)]
    log: PathBuf,
    /// Baseline table: `corruption,severity,error` for mce,
    /// `perturbation,flip_rate` for mfr.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Minimum seconds per measured phase.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    #[command(flatten)]
    engine: EngineArgs,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got '{s}'"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad number in '{s}'"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad number in '{s}'"))?;
    if a == 0 || b == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((a, b))
}

fn parse_framework(s: &str) -> Result<Framework, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mix_op(s: &str) -> Result<MixOperator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl EngineArgs {
    fn run_config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        let aug = &mut cfg.augment;
        if let Some(v) = self.framework {
            aug.framework = v;
        }
        if let Some(v) = self.k {
            aug.k = v;
        }
        if let Some(v) = self.t {
            aug.t = v;
        }
        if let Some(v) = self.alpha {
            aug.alpha = v;
        }
        if let Some(v) = &self.patch_sizes {
            aug.patch_sizes = v.clone();
        }
        if let Some(v) = &self.mix_ops {
            aug.mix_ops = v.clone();
        }
        if self.no_scar {
            aug.scar_enabled = false;
        }
        if let Some(v) = self.fractal_prob {
            aug.fractal_prob = v;
        }
        if let Some(v) = self.method {
            aug.method = match v {
                MethodArg::Uniform => MethodPolicy::Uniform,
                MethodArg::ImageOnly => MethodPolicy::ImageOnly,
                MethodArg::POnly => MethodPolicy::POnly,
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.fractals {
            cfg.fractals = Some(v.clone());
        }
        if let Some(v) = self.n_fractals {
            cfg.n_fractals = v;
        }
        if let Some(v) = self.fractal_size {
            cfg.fractal_size = v;
        }
        cfg.augment.validate()?;
        Ok(cfg)
    }

    fn engine(&self) -> Result<(RunConfig, Augmenter), Error> {
        let cfg = self.run_config()?;
        let set = cfg.mixing_set()?;
        let engine = Augmenter::new(cfg.augment.clone(), set)?;
        Ok((cfg, engine))
    }
}

fn read_image(path: &Path) -> Result<ipmix::ImageBuffer, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn report_json(report: &MetricReport) -> serde_json::Value {
    serde_json::json!({
        "metric": report.metric,
        "value": report.value,
        "groups": report.groups,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::FractalGen(args) => {
            let mut rng = SeededRng::new(args.seed);
            let set = build_mixing_set(args.n_escape, args.n_ifs, args.external.as_deref(), args.size, &mut rng)?;
            let manifest = write_mixing_set(&set, &args.out)?;
            log::info!("wrote {} images and {}", set.len(), manifest.display());
        }
        Command::Augment(args) => {
            let (cfg, engine) = args.engine.engine()?;
            let workers = match args.workers {
                Some(n) => RunConfig { workers: Some(n), ..cfg.clone() }.resolved_workers()?,
                None => cfg.resolved_workers()?,
            };
            let summary = run_augment(&args.input, &args.out, &engine, cfg.seed, workers)?;
            log::info!("augmented {} images; manifest at {}", summary.images, summary.manifest.display());
        }
        Command::Preview(args) => {
            let img = read_image(&args.input)?;
            let out = match &args.op {
                Some(op) => apply_named(&img, op, args.strength)?,
                None => {
                    let (cfg, engine) = args.engine.engine()?;
                    preview_grid(&img, &engine, args.grid.0, args.grid.1, cfg.seed)?
                }
            };
            write_bytes(&args.out, &encode_png(&out)?)?;
        }
        Command::Metrics(args) => {
            let log = PredictionLog::from_csv_path(&args.log)?;
            let need_baseline = || {
                args.baseline
                    .clone()
                    .ok_or_else(|| Error::Config("this metric needs --baseline".into()))
            };
            let value = match args.kind {
                MetricKind::Clean => serde_json::json!({ "metric": "clean_error", "value": clean_error(&log), "groups": {} }),
                MetricKind::Rms => serde_json::json!({ "metric": "rms_calibration", "value": rms_calibration(&log), "groups": {} }),
                MetricKind::Aupr => serde_json::json!({ "metric": "aupr", "value": aupr_from_log(&log)?, "groups": {} }),
                MetricKind::Mce => {
                    let base = BaselineErrors::from_csv_path(&need_baseline()?)?;
                    report_json(&mce(&log, &base)?)
                }
                MetricKind::Mfr => {
                    let base = BaselineFlipRates::from_csv_path(&need_baseline()?)?;
                    report_json(&mfr(&log, &base)?)
                }
            };
            print_json(&value);
        }
        Command::Bench(args) => {
            let (cfg, engine) = args.engine.engine()?;
            let workers = match args.workers {
                Some(n) => RunConfig { workers: Some(n), ..cfg.clone() }.resolved_workers()?,
                None => cfg.resolved_workers()?,
            };
            if !(args.duration.is_finite() && args.duration >= 0.0) {
                return Err(Error::Config("duration must be a non-negative number of seconds".into()));
            }
            let report = run_bench(&args.input, &engine, workers, Duration::from_secs_f64(args.duration), cfg.seed)?;
            print_json(&serde_json::to_value(&report).expect("report serializes"));
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Io { .. } | Error::Decode { .. } | Error::Encode(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

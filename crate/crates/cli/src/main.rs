//! `qkit` command-line front end.
//!
//! Every command reads QTNS/QTNQ containers, writes its outputs atomically
//! into `--out-dir`, and prints a JSON summary of what it wrote to stdout.
//! Failures are reported as JSON on stderr with a nonzero exit status.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use qkit::bias::CorrectionMode;
use qkit::calibration::{calibrate, CalibrationMode, DEFAULT_K};
use qkit::datapath::{overhead_report, simulate_rows, DatapathConfig};
use qkit::distribution::DistributionKind;
use qkit::format;
use qkit::recipe::{analyze, perturbation_study, quantize_tensor, AnalyzeOptions, Reconstruction, Recipe, SchemeKind};
use qkit::solver::BreakpointMethod;
use qkit::{Granularity, Tensor};

const REPORT_VERSION: u32 = 1;

/// Relative tolerance of the verbose-mode datapath check.
const DATAPATH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "qkit", version, about = "Piecewise linear post-training quantization toolkit")]
struct Cli {
    /// Run internal oracle checks and fail on any violation.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize a QTNS tensor into a QTNQ file plus a recipe/report sidecar.
    Quantize(QuantizeArgs),
    /// Compare an original tensor with its reconstruction; emits a JSON report and an MSE-vs-breakpoint CSV.
    Analyze(AnalyzeArgs),
    /// Breakpoint perturbation study: MSE quartiles per perturbation level.
    Sweep(SweepArgs),
    /// Activation clipping ranges from a directory of QTNS samples.
    Calibrate(CalibrateArgs),
    /// Integer datapath simulation of quantized weights against quantized activations.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct Shared {
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Bit width, 2..=8.
    #[arg(long)]
    bits: Option<u8>,
    /// uniform | pwlq
    #[arg(long)]
    scheme: Option<String>,
    /// per-layer | per-channel
    #[arg(long)]
    granularity: Option<String>,
    /// Shorthand for `--granularity per-channel`.
    #[arg(long, conflicts_with = "granularity")]
    per_channel: bool,
    /// gradient-descent | closed-form-gaussian | empirical-grid
    #[arg(long)]
    breakpoint_method: Option<String>,
    /// Number of breakpoints (calibrate: number of extremes per side).
    #[arg(long)]
    k: Option<usize>,
    /// none | mean-only | mean-and-variance (bare flag: mean-and-variance)
    #[arg(long, num_args = 0..=1, default_missing_value = "mean-and-variance")]
    bias_correction: Option<String>,
    /// gaussian | laplacian
    #[arg(long)]
    distribution: Option<String>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Recipe JSON to start from; explicit flags override its fields.
    #[arg(long)]
    recipe: Option<PathBuf>,
}

impl Shared {
    fn granularity(&self) -> Result<Option<Granularity>> {
        if self.per_channel {
            return Ok(Some(Granularity::PerChannel));
        }
        Ok(self.granularity.as_deref().map(str::parse).transpose()?)
    }

    fn recipe(&self) -> Result<Recipe> {
        let mut r = match &self.recipe {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Recipe::from_json(&text)?
            }
            None => Recipe::default(),
        };
        if let Some(s) = self.seed {
            r.seed = s;
        }
        if let Some(b) = self.bits {
            r.bit_width = b;
        }
        if let Some(s) = &self.scheme {
            r.scheme = s.parse::<SchemeKind>()?;
        }
        if let Some(g) = self.granularity()? {
            r.granularity = g;
        }
        if let Some(m) = &self.breakpoint_method {
            r.breakpoint_method = m.parse::<BreakpointMethod>()?;
        }
        if let Some(k) = self.k {
            r.breakpoints = k;
        }
        if let Some(bc) = &self.bias_correction {
            r.bias_correction = match bc.as_str() {
                "none" => None,
                mode => Some(mode.parse::<CorrectionMode>()?),
            };
        }
        if let Some(d) = &self.distribution {
            r.distribution = d.parse::<DistributionKind>()?;
        }
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Input QTNS tensor.
    input: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Original QTNS tensor.
    original: PathBuf,
    /// Reconstruction: a QTNQ file, or a QTNS tensor (then --bits and --granularity describe it).
    reconstruction: PathBuf,
    /// Grid points of the MSE-vs-breakpoint sweep.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Input QTNS tensor.
    input: PathBuf,
    /// Comma-separated perturbation levels in percent.
    #[arg(long, default_value = "5,10,20,30")]
    levels: String,
    /// Seeded trials per level.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of QTNS activation samples; files are grouped into layers
    /// by the part of the file name before the first '.'.
    dir: PathBuf,
    /// pooled | per-sample
    #[arg(long, default_value = "pooled")]
    mode: String,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Quantized weights (QTNQ); each row of activation length is one output.
    weights: PathBuf,
    /// Quantized activation vector (QTNQ, uniform, per-layer).
    activations: PathBuf,
    /// Uniformly quantized weights of the same shape, for the overhead comparison.
    #[arg(long)]
    baseline_weights: Option<PathBuf>,
    /// Signed accumulator width in bits.
    #[arg(long, default_value_t = 64)]
    accumulator_bits: u32,
    #[command(flatten)]
    shared: Shared,
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    use std::io::Write;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target).map_err(|e| e.error).with_context(|| format!("writing {}", target.display()))?;
    Ok(target)
}

fn to_json(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Base name of an input file: everything before the first '.'.
fn stem(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("{} has no usable file name", path.display()))?;
    Ok(name.split('.').next().unwrap_or(name).to_string())
}

fn check(verbose: bool, ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if verbose && !ok {
        bail!(qkit::Error::Data(format!("oracle check failed: {}", what())));
    }
    Ok(())
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn cmd_quantize(args: &QuantizeArgs, verbose: bool) -> Result<Value> {
    let recipe = args.shared.recipe()?;
    let t = format::load_tensor(&args.input)?;
    let outcome = quantize_tensor(&t, &recipe)?;
    let bytes = format::encode_quantized(&outcome.quantized)?;

    if verbose {
        let back = format::decode_quantized(&bytes)?;
        check(true, back == outcome.quantized, || "QTNQ round trip changed the tensor".into())?;
        let decoded = back.reconstruct();
        let mse = decoded.iter().zip(t.data()).map(|(q, &w)| (q - f64::from(w)).powi(2)).sum::<f64>()
            / t.len() as f64;
        check(true, relative(mse, outcome.mse) <= 1e-12, || {
            format!("reported MSE {} vs recomputed {mse}", outcome.mse)
        })?;
    }

    let name = stem(&args.input)?;
    let dir = &args.shared.out_dir;
    let codes = write_atomic(dir, &format!("{name}.qtnq"), &bytes)?;
    let sidecar = json!({
        "version": REPORT_VERSION,
        "input": args.input,
        "recipe": recipe,
        "mse": outcome.mse,
        "channels": outcome.channels,
    });
    let sidecar = write_atomic(dir, &format!("{name}.recipe.json"), &to_json(&sidecar)?)?;
    Ok(json!({ "version": REPORT_VERSION, "command": "quantize", "mse": outcome.mse, "outputs": [codes, sidecar] }))
}

fn cmd_analyze(args: &AnalyzeArgs, verbose: bool) -> Result<Value> {
    let original = format::load_tensor(&args.original)?;
    let bytes = std::fs::read(&args.reconstruction).with_context(|| format!("reading {}", args.reconstruction.display()))?;
    let shared = &args.shared;
    let opts = AnalyzeOptions {
        distribution: shared.distribution.as_deref().map(str::parse).transpose()?.unwrap_or(DistributionKind::Gaussian),
        sweep_points: args.points,
        bit_width: shared.bits.unwrap_or(AnalyzeOptions::default().bit_width),
        granularity: shared.granularity()?.unwrap_or(Granularity::PerLayer),
    };
    let analysis = if bytes.starts_with(format::QUANTIZED_MAGIC) {
        let q = format::decode_quantized(&bytes)?;
        analyze(&original, Reconstruction::Quantized(&q), &opts)?
    } else {
        let dense = format::decode_tensor(&bytes)?;
        analyze(&original, Reconstruction::Dense(&dense), &opts)?
    };
    for c in &analysis.channels {
        check(verbose, c.mse.is_finite() && c.mse >= 0.0, || format!("channel {} MSE {}", c.index, c.mse))?;
    }

    let name = stem(&args.reconstruction)?;
    let dir = &shared.out_dir;
    let report = json!({
        "version": REPORT_VERSION,
        "original": args.original,
        "reconstruction": args.reconstruction,
        "analysis": analysis,
    });
    let report = write_atomic(dir, &format!("{name}.analysis.json"), &to_json(&report)?)?;
    let csv = write_atomic(dir, &format!("{name}.mse_sweep.csv"), analysis.sweep_csv().as_bytes())?;
    Ok(json!({ "version": REPORT_VERSION, "command": "analyze", "mse": analysis.mse, "outputs": [report, csv] }))
}

fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            let pct: f64 = v.parse().with_context(|| format!("invalid perturbation level '{v}'"))?;
            Ok(pct / 100.0)
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs, verbose: bool) -> Result<Value> {
    let recipe = args.shared.recipe()?;
    let levels = parse_levels(&args.levels)?;
    let t = format::load_tensor(&args.input)?;
    let report = perturbation_study(&t, &recipe, &levels, args.trials)?;
    for l in report.levels.iter().filter(|l| l.fraction == 0.0) {
        check(verbose, l.mse.min == l.mse.max && l.mse.min == report.baseline_mse, || {
            "zero perturbation changed the MSE".into()
        })?;
    }

    let name = stem(&args.input)?;
    let out = json!({ "version": REPORT_VERSION, "input": args.input, "recipe": recipe, "report": report });
    let path = write_atomic(&args.shared.out_dir, &format!("{name}.perturbation.json"), &to_json(&out)?)?;
    Ok(json!({ "version": REPORT_VERSION, "command": "sweep", "outputs": [path] }))
}

fn cmd_calibrate(args: &CalibrateArgs, verbose: bool) -> Result<Value> {
    let mode: CalibrationMode = args.mode.parse()?;
    let k = args.shared.k.unwrap_or(DEFAULT_K);
    let mut layers: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(&args.dir).with_context(|| format!("reading {}", args.dir.display()))? {
        let path = entry?.path();
        if path.is_file() {
            layers.entry(stem(&path)?).or_default().push(path);
        }
    }
    if layers.is_empty() {
        bail!(qkit::Error::InvalidArgument(format!("no sample files in {}", args.dir.display())));
    }
    let mut ranges = BTreeMap::new();
    for (layer, mut files) in layers {
        files.sort();
        let samples: Vec<Tensor> = files
            .iter()
            .map(|f| format::load_tensor(f).with_context(|| format!("loading {}", f.display())))
            .collect::<Result<_>>()?;
        let r = calibrate(&samples, k, mode)?;
        check(verbose, r.min <= r.max, || format!("layer {layer}: inverted range [{}, {}]", r.min, r.max))?;
        ranges.insert(layer, json!({ "min": r.min, "max": r.max, "k": r.k, "samples": r.samples, "degraded": r.degraded }));
    }
    let out = json!({ "version": REPORT_VERSION, "mode": mode, "layers": ranges });
    let path = write_atomic(&args.shared.out_dir, "calibration.json", &to_json(&out)?)?;
    Ok(json!({ "version": REPORT_VERSION, "command": "calibrate", "outputs": [path] }))
}

#[derive(Serialize)]
struct RowReport {
    row: usize,
    value: f64,
    reference: f64,
    relative_error: f64,
    trace: qkit::datapath::DatapathTrace,
}

fn cmd_simulate(args: &SimulateArgs, verbose: bool) -> Result<Value> {
    let cfg = DatapathConfig { accumulator_bits: args.accumulator_bits };
    let weights = format::load_quantized(&args.weights)?;
    let activations = format::load_quantized(&args.activations)?;
    let rows = simulate_rows(&weights, &activations, &cfg)?;
    let scale: f64 = activations.reconstruct().iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut reports = Vec::with_capacity(rows.len());
    for (row, (value, reference, trace)) in rows.into_iter().enumerate() {
        let err = relative(value, reference);
        check(verbose, (value - reference).abs() <= DATAPATH_TOLERANCE * reference.abs().max(scale * 1e-6), || {
            format!("row {row}: datapath {value} vs reference {reference}")
        })?;
        reports.push(RowReport { row, value, reference, relative_error: err, trace });
    }

    let overhead = match &args.baseline_weights {
        Some(path) => {
            let base = format::load_quantized(path)?;
            if base.shape() != weights.shape() {
                bail!(qkit::Error::ShapeMismatch(format!(
                    "baseline weights {:?} vs weights {:?}",
                    base.shape(),
                    weights.shape()
                )));
            }
            let base_rows = simulate_rows(&base, &activations, &cfg)?;
            let per_row: Vec<_> =
                base_rows.iter().zip(&reports).map(|(b, r)| overhead_report(&b.2, &r.trace)).collect();
            Some(per_row)
        }
        None => None,
    };

    let out = json!({
        "version": REPORT_VERSION,
        "weights": args.weights,
        "activations": args.activations,
        "accumulator_bits": cfg.accumulator_bits,
        "rows": reports,
        "overhead": overhead,
    });
    let name = stem(&args.weights)?;
    let path = write_atomic(&args.shared.out_dir, &format!("{name}.simulate.json"), &to_json(&out)?)?;
    Ok(json!({ "version": REPORT_VERSION, "command": "simulate", "outputs": [path] }))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QKIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("QKIT_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Value> {
    configure_threads()?;
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, cli.verbose),
        Command::Analyze(a) => cmd_analyze(a, cli.verbose),
        Command::Sweep(a) => cmd_sweep(a, cli.verbose),
        Command::Calibrate(a) => cmd_calibrate(a, cli.verbose),
        Command::Simulate(a) => cmd_simulate(a, cli.verbose),
    }
}

fn error_json(kind: &str, message: String) -> String {
    json!({ "version": REPORT_VERSION, "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<qkit::Error>().map_or("error", qkit::Error::kind);
            eprintln!("{}", error_json(kind, format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

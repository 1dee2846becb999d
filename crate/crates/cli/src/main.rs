//! `ppp`: pipeline driver for probability-preserving prediction of
//! extremes.
//!
//! Subcommands cover the full workflow: `gen-cloud` simulates the Monte
//! Carlo point cloud, `build` turns a cloud into a calibrated increment
//! table, `predict` applies a table to one observed sample, `validate`
//! measures delivered exceedance rates, and `emit-figures` writes
//! plot-ready CSV data. Exit codes: 0 success, 2 usage or validation,
//! 3 domain error, 4 I/O or file-format error.

mod config;
mod figures;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ppp_core::cloud::gen_cloud;
use ppp_core::predictor::{build_table, predict};
use ppp_core::validate::{
    basic_vertical, validate_horizontal, validate_horizontal_in_sample, validate_vertical,
    ExceedanceReport,
};
use ppp_core::{CloudReader, Error, IncrementTable, OrderedSample, Result};
use serde::Serialize;

use config::{ModeArg, Settings};

/// Comma-separated recurrence multiples as a single argument value.
#[derive(Debug, Clone)]
struct TList(Vec<f64>);

impl FromStr for TList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        config::parse_t_list(s).map(TList)
    }
}

#[derive(Parser)]
#[command(
    name = "ppp",
    version,
    about = "Probability-preserving prediction of extremes from generalized Pareto tails"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct CommonArgs {
    /// TOML file with default parameter values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Pin all constants to the published study values
    /// (n=20, 8e6 points, psi in [-4,4], slice width 0.1, T grid).
    #[arg(long, global = true)]
    paper_defaults: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a point cloud of (psi, psi_hat, w_next) triples.
    GenCloud(GenCloudArgs),
    /// Build a calibrated increment table from a cloud.
    Build(BuildArgs),
    /// Apply a table to one observed sample.
    Predict(PredictArgs),
    /// Measure delivered exceedance rates of a table on a cloud.
    Validate(ValidateArgs),
    /// Write plot-ready CSV data files.
    EmitFigures(figures::EmitFiguresArgs),
}

#[derive(Args)]
struct GenCloudArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for chunks and manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    n_points: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    psi_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    psi_max: Option<f64>,
    /// Sample size behind each point.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    chunk_size: Option<u64>,
    /// Worker threads; output is identical for any value.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Cloud directory to read.
    #[arg(long, value_name = "DIR")]
    cloud: PathBuf,
    /// Path of the table file to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    slice_width: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    slice_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    slice_max: Option<f64>,
    /// Slices with fewer points are left absent.
    #[arg(long)]
    min_points: Option<usize>,
    /// Comma-separated recurrence multiples.
    #[arg(long, value_name = "T,T,...")]
    t_levels: Option<TList>,
    #[arg(long, value_enum)]
    quantile_mode: Option<ModeArg>,
    /// Worker threads; output is identical for any value.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Increment table file.
    #[arg(long, value_name = "FILE")]
    table: PathBuf,
    /// Observations, one real number per line.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Recurrence multiples to predict at; defaults to the table's grid.
    #[arg(long, value_name = "T,T,...")]
    t_levels: Option<TList>,
    /// Emit machine-readable JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Vertical,
    Horizontal,
    Both,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    table: PathBuf,
    /// Cloud to measure on; must not reuse the build seed unless
    /// --in-sample is given.
    #[arg(long, value_name = "DIR")]
    cloud: PathBuf,
    /// Directory for report files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    axis: AxisArg,
    /// Allow measuring on the build cloud itself (horizontal axis only);
    /// in-sample agreement is a consistency check, not calibration
    /// evidence.
    #[arg(long)]
    in_sample: bool,
    /// Also report the zero-increment plug-in predictor for comparison.
    #[arg(long)]
    include_basic: bool,
    /// Recurrence multiples; defaults to the table's grid.
    #[arg(long, value_name = "T,T,...")]
    t_levels: Option<TList>,
    /// Worker threads; output is identical for any value.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A reader that stops consuming our stdout is not a failure.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::SeedReuse { .. } => 2,
        Error::DegenerateSample
        | Error::OutOfSupport { .. }
        | Error::OutOfRange { .. }
        | Error::NoSolution { .. }
        | Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
    }
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    let Some(k) = workers else {
        return Ok(());
    };
    if k == 0 {
        return Err(Error::InvalidInput("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(k)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCloud(args) => cmd_gen_cloud(args),
        Command::Build(args) => cmd_build(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Validate(args) => cmd_validate(args),
        Command::EmitFigures(args) => figures::cmd_emit_figures(args),
    }
}

fn cmd_gen_cloud(args: GenCloudArgs) -> Result<()> {
    set_workers(args.workers)?;
    let settings = Settings::load(args.common.config.as_deref(), args.common.paper_defaults)?;
    let config = settings.cloud_config(
        args.n_points,
        args.psi_min,
        args.psi_max,
        args.n,
        args.seed,
        args.chunk_size,
    )?;
    let manifest = gen_cloud(&config, &args.out)?;
    let hash = ppp_core::cloud::CloudManifest::sha256_hex(&args.out)?;
    println!(
        "cloud {}: {} points in {} chunks, seed {}, psi [{}, {}], n {}",
        args.out.display(),
        manifest.n_points,
        manifest.chunk_count,
        manifest.seed,
        manifest.psi_min,
        manifest.psi_max,
        manifest.n,
    );
    println!(
        "  retries {}, clamped {} ({:.3}%), manifest sha256 {}",
        manifest.retry_count,
        manifest.clamped_count,
        100.0 * manifest.clamped_count as f64 / manifest.n_points as f64,
        hash,
    );
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    set_workers(args.workers)?;
    let settings = Settings::load(args.common.config.as_deref(), args.common.paper_defaults)?;
    let spec = settings.slice_spec(
        args.slice_width,
        args.slice_min,
        args.slice_max,
        args.min_points,
    )?;
    let t_levels = settings.t_levels(args.t_levels.as_ref().map(|t| t.0.as_slice()));
    let mode = settings.quantile_mode(args.quantile_mode);

    let reader = CloudReader::open(&args.cloud)?;
    let table = build_table(&reader, &spec, &t_levels, mode)?;
    table.save(&args.out)?;

    let occupied = table.d_xi.iter().filter(|r| r.is_some()).count();
    println!(
        "table {}: {} of {} slices occupied, T {:?}, n {}",
        args.out.display(),
        occupied,
        table.centers.len(),
        table.t_levels,
        table.n,
    );
    println!(
        "  source cloud seed {}, audit max deviation {:.2e}",
        table.build.cloud_seed,
        table.audit()?,
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionOut {
    t: f64,
    d_xi: f64,
    xi_p: f64,
    u_pred: f64,
    x_pred: f64,
}

#[derive(Serialize)]
struct PredictOut {
    xi_hat: f64,
    psi_hat: f64,
    rss: f64,
    clamped: bool,
    predictions: Vec<PredictionOut>,
}

fn read_observations(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|e| {
            Error::InvalidInput(format!(
                "{}:{}: not a number: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let table = IncrementTable::load(&args.table)?;
    let values = read_observations(&args.data)?;
    if values.len() != table.n {
        return Err(Error::InvalidInput(format!(
            "expected {} observations for this table, got {}",
            table.n,
            values.len()
        )));
    }
    let sample = OrderedSample::new(values)?;
    let t_levels = match &args.t_levels {
        Some(ts) => ts.0.clone(),
        None => table.t_levels.clone(),
    };
    let (est, predictions) = predict(&table, &sample, &t_levels)?;

    if args.json {
        let out = PredictOut {
            xi_hat: est.xi_hat,
            psi_hat: est.psi_hat,
            rss: est.rss,
            clamped: est.clamped,
            predictions: predictions
                .iter()
                .map(|p| PredictionOut {
                    t: p.t,
                    d_xi: p.d_xi,
                    xi_p: p.xi_p,
                    u_pred: p.u_pred,
                    x_pred: p.x_pred,
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&out)
            .map_err(|e| Error::Numeric(format!("prediction serialization failed: {e}")))?;
        text.push('\n');
        std::io::stdout().write_all(text.as_bytes())?;
        return Ok(());
    }

    println!(
        "xi_hat {:.6}  psi_hat {:.6}  rss {:.3e}{}",
        est.xi_hat,
        est.psi_hat,
        est.rss,
        if est.clamped { "  (clamped)" } else { "" },
    );
    println!("{:>8}  {:>12} {:>12} {:>14} {:>14}", "T", "d_xi", "xi_p", "u_pred", "x_pred");
    for p in &predictions {
        println!(
            "{:>8}  {:>12.6} {:>12.6} {:>14.6e} {:>14.6e}",
            p.t, p.d_xi, p.xi_p, p.u_pred, p.x_pred
        );
    }
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &ExceedanceReport) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut csv = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    report.write_csv(&mut csv)?;
    csv.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut json = std::io::BufWriter::new(fs::File::create(&json_path)?);
    report.write_json(&mut json)?;
    json.flush()?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn print_pooled(label: &str, report: &ExceedanceReport, lo: f64, hi: f64) {
    for pooled in report.pooled(lo, hi) {
        println!(
            "  {label} T {:>5}: delivered {:.5} vs nominal {:.5} ({} of {})",
            pooled.t,
            pooled.rate,
            1.0 / pooled.t,
            pooled.count,
            pooled.size,
        );
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    set_workers(args.workers)?;
    let table = IncrementTable::load(&args.table)?;
    let reader = CloudReader::open(&args.cloud)?;
    // Measure on the very geometry the table was built with.
    let spec = ppp_core::SliceSpec {
        width: table.slice_width,
        centers: table.centers.clone(),
        min_points: 1,
    };
    let t_levels = match &args.t_levels {
        Some(ts) => ts.0.clone(),
        None => table.t_levels.clone(),
    };
    fs::create_dir_all(&args.out_dir)?;
    let (lo, hi) = (spec.centers[0], spec.centers[spec.centers.len() - 1]);

    if matches!(args.axis, AxisArg::Vertical | AxisArg::Both) {
        let report = validate_vertical(&table, &reader, &spec, &t_levels)?;
        print_pooled("vertical", &report, lo, hi);
        write_report(&args.out_dir, "validate_vertical", &report)?;
    }
    if matches!(args.axis, AxisArg::Horizontal | AxisArg::Both) {
        let report = if args.in_sample {
            validate_horizontal_in_sample(&table, &reader, &spec, &t_levels)?
        } else {
            validate_horizontal(&table, &reader, &spec, &t_levels)?
        };
        print_pooled("horizontal", &report, lo, hi);
        write_report(&args.out_dir, "validate_horizontal", &report)?;
    }
    if args.include_basic {
        let report = basic_vertical(&reader, &spec, &t_levels, table.n)?;
        print_pooled("basic", &report, lo, hi);
        write_report(&args.out_dir, "validate_basic_vertical", &report)?;
    }
    Ok(())
}

//! Plot-data emitters: one or more CSV files per figure, rendering left
//! to external tools.
//!
//! * `fig3a`, `fig3b` — sampling deciles of the fitted shape along a grid
//!   of true shapes, on the shape scale and on the `asinh` scale.
//! * `fig3c` — kernel densities on slices through the cloud at constant
//!   true shape and at constant fitted shape, plus per-slice counts.
//! * `fig4` — a decimated scatter of the cloud in the (fitted shape,
//!   transformed next-draw) plane with per-slice level marks.
//! * `fig5` — calibrated increments per slice center and recurrence
//!   multiple, in both shape parameterizations.
//! * `fig6` — extrapolation curves (plug-in vs calibrated) over a dense
//!   recurrence grid with rank anchors from prediction plotting
//!   positions.
//! * `fig7` — delivered exceedance rates of the calibrated and plug-in
//!   predictors on a held-out cloud, on both slicing axes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use ppp_core::estimator::{model_curve, Plotting};
use ppp_core::predictor::{centers_range, level_u, SliceSpec};
use ppp_core::validate::{
    basic_vertical, estimator_deciles, slice_densities, validate_horizontal, validate_vertical,
    SliceAxis,
};
use ppp_core::{CloudReader, Error, IncrementTable, Result};

use crate::config::{self, Settings};
use crate::{CommonArgs, TList};

/// Keeps decile-simulation substreams from aliasing cloud-point
/// substreams generated under the same seed.
const DECILE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Args)]
pub struct EmitFiguresArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory receiving the CSV files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Cloud directory (fig3c, fig4).
    #[arg(long, value_name = "DIR")]
    cloud: Option<PathBuf>,
    /// Increment table (fig4, fig5, fig6).
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Held-out cloud measured against the table (fig7).
    #[arg(long, value_name = "DIR")]
    validation_cloud: Option<PathBuf>,
    /// Comma-separated subset of fig3a,fig3b,fig3c,fig4,fig5,fig6,fig7.
    #[arg(long, value_name = "LIST", default_value = "all")]
    figures: String,
    /// Replicates per grid point for the decile curves.
    #[arg(long, default_value_t = 2000)]
    decile_reps: usize,
    /// Grid step in the transformed shape for the decile curves.
    #[arg(long, default_value_t = 0.25)]
    decile_step: f64,
    /// Range of the decile-curve grid.
    #[arg(long, allow_hyphen_values = true)]
    psi_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    psi_max: Option<f64>,
    /// Seed for the decile simulation.
    #[arg(long)]
    seed: Option<u64>,
    /// Greatest number of scatter rows written for fig4.
    #[arg(long, default_value_t = 20_000)]
    scatter_max: u64,
    /// Fitted-shape cases for the extrapolation curves.
    #[arg(
        long,
        value_name = "XI,XI,...",
        default_value = "-1,-0.5,0,0.5,1",
        allow_hyphen_values = true
    )]
    fig6_shapes: String,
    /// Recurrence multiples for fig7; defaults to the table's grid.
    #[arg(long, value_name = "T,T,...")]
    t_levels: Option<TList>,
    #[arg(long)]
    slice_width: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    slice_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    slice_max: Option<f64>,
    #[arg(long)]
    min_points: Option<usize>,
    /// Worker threads; output is identical for any value.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FigureId {
    Fig3a,
    Fig3b,
    Fig3c,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
}

const ALL_FIGURES: [FigureId; 7] = [
    FigureId::Fig3a,
    FigureId::Fig3b,
    FigureId::Fig3c,
    FigureId::Fig4,
    FigureId::Fig5,
    FigureId::Fig6,
    FigureId::Fig7,
];

fn parse_figures(text: &str) -> Result<Vec<FigureId>> {
    if text.trim() == "all" {
        return Ok(ALL_FIGURES.to_vec());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let id = match part.trim() {
            "fig3a" => FigureId::Fig3a,
            "fig3b" => FigureId::Fig3b,
            "fig3c" => FigureId::Fig3c,
            "fig4" => FigureId::Fig4,
            "fig5" => FigureId::Fig5,
            "fig6" => FigureId::Fig6,
            "fig7" => FigureId::Fig7,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown figure {other:?}; expected fig3a..fig7 or all"
                )))
            }
        };
        if !out.contains(&id) {
            out.push(id);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no figures selected".into()));
    }
    Ok(out)
}

fn need<'a, T>(input: &'a Option<T>, figure: &str, flag: &str) -> Result<&'a T> {
    input
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("{figure} needs {flag}")))
}

fn csv_writer(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn finish(dir: &Path, name: &str, mut out: BufWriter<fs::File>, rows: usize) -> Result<()> {
    out.flush()?;
    println!("wrote {} ({rows} rows)", dir.join(name).display());
    Ok(())
}

pub fn cmd_emit_figures(args: EmitFiguresArgs) -> Result<()> {
    crate::set_workers(args.workers)?;
    let settings = Settings::load(args.common.config.as_deref(), args.common.paper_defaults)?;
    let selected = parse_figures(&args.figures)?;
    fs::create_dir_all(&args.out_dir)?;

    let cloud = match &args.cloud {
        Some(dir) => Some(CloudReader::open(dir)?),
        None => None,
    };
    let validation_cloud = match &args.validation_cloud {
        Some(dir) => Some(CloudReader::open(dir)?),
        None => None,
    };
    let table = match &args.table {
        Some(path) => Some(IncrementTable::load(path)?),
        None => None,
    };
    let spec = settings.slice_spec(
        args.slice_width,
        args.slice_min,
        args.slice_max,
        args.min_points,
    )?;

    let want_3a = selected.contains(&FigureId::Fig3a);
    let want_3b = selected.contains(&FigureId::Fig3b);
    if want_3a || want_3b {
        fig3_deciles(&args, &settings, want_3a, want_3b)?;
    }
    for fig in &selected {
        match fig {
            FigureId::Fig3a | FigureId::Fig3b => {}
            FigureId::Fig3c => {
                let reader = need(&cloud, "fig3c", "--cloud")?;
                fig3c_densities(&args.out_dir, reader, &spec)?;
            }
            FigureId::Fig4 => {
                let reader = need(&cloud, "fig4", "--cloud")?;
                let table = need(&table, "fig4", "--table")?;
                fig4_cloud(&args.out_dir, reader, table, args.scatter_max)?;
            }
            FigureId::Fig5 => {
                let table = need(&table, "fig5", "--table")?;
                fig5_increments(&args.out_dir, table)?;
            }
            FigureId::Fig6 => {
                let table = need(&table, "fig6", "--table")?;
                let shapes = config::parse_t_list(&args.fig6_shapes)
                    .map_err(|e| Error::InvalidInput(format!("--fig6-shapes: {e}")))?;
                fig6_extrapolations(&args.out_dir, table, &shapes)?;
            }
            FigureId::Fig7 => {
                let table = need(&table, "fig7", "--table")?;
                let reader = need(&validation_cloud, "fig7", "--validation-cloud")?;
                let t_levels = match &args.t_levels {
                    Some(ts) => ts.0.clone(),
                    None => table.t_levels.clone(),
                };
                fig7_performance(&args.out_dir, table, reader, &t_levels)?;
            }
        }
    }
    Ok(())
}

fn fig3_deciles(
    args: &EmitFiguresArgs,
    settings: &Settings,
    want_3a: bool,
    want_3b: bool,
) -> Result<()> {
    let (psi_min, psi_max) = settings.psi_range(args.psi_min, args.psi_max);
    let grid = centers_range(psi_min, psi_max, args.decile_step);
    let seed = settings.seed(args.seed)? ^ DECILE_SEED_OFFSET;
    let curves = estimator_deciles(&grid, args.decile_reps, seed, settings.n(None))?;

    let header: String = (1..=9).map(|d| format!(",d{}0", d)).collect();
    if want_3a {
        let name = "fig3a_deciles_xi.csv";
        let mut out = csv_writer(&args.out_dir, name)?;
        writeln!(out, "xi{header}")?;
        let mut rows = 0;
        for (psi, deciles) in curves.psi_grid.iter().zip(curves.deciles_xi()) {
            write!(out, "{}", psi.sinh())?;
            for d in deciles {
                write!(out, ",{d}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
        finish(&args.out_dir, name, out, rows)?;
    }
    if want_3b {
        let name = "fig3b_deciles_psi.csv";
        let mut out = csv_writer(&args.out_dir, name)?;
        writeln!(out, "psi{header}")?;
        let mut rows = 0;
        for (psi, deciles) in curves.psi_grid.iter().zip(&curves.deciles_psi) {
            write!(out, "{psi}")?;
            for d in deciles {
                write!(out, ",{d}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
        finish(&args.out_dir, name, out, rows)?;
    }
    Ok(())
}

/// Points per slice along one axis, including slices too sparse for a
/// density estimate.
fn slice_counts(reader: &CloudReader, spec: &SliceSpec, axis: SliceAxis) -> Result<Vec<u64>> {
    reader.fold_chunks(
        |points| {
            let mut acc = vec![0u64; spec.centers.len()];
            for p in &points {
                let coord = match axis {
                    SliceAxis::Vertical => p.psi,
                    SliceAxis::Horizontal => p.psi_hat,
                };
                if let Some(k) = spec.slice_index(coord) {
                    acc[k] += 1;
                }
            }
            Ok(acc)
        },
        vec![0u64; spec.centers.len()],
        |acc, part| {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        },
    )
}

fn fig3c_densities(out_dir: &Path, reader: &CloudReader, spec: &SliceSpec) -> Result<()> {
    // Slices at constant true shape span the full simulated range; slices
    // at constant fitted shape use the configured (narrower) range, which
    // is exactly where end effects motivate the restriction.
    let manifest = reader.manifest();
    let vertical_spec = SliceSpec {
        width: spec.width,
        centers: centers_range(manifest.psi_min, manifest.psi_max, spec.width),
        min_points: spec.min_points,
    };

    let counts_name = "fig3c_counts.csv";
    let mut counts_out = csv_writer(out_dir, counts_name)?;
    writeln!(counts_out, "axis,center,count")?;
    let mut count_rows = 0;

    for (axis, axis_spec, name) in [
        (SliceAxis::Vertical, &vertical_spec, "fig3c_density_vertical.csv"),
        (SliceAxis::Horizontal, spec, "fig3c_density_horizontal.csv"),
    ] {
        for (center, count) in axis_spec
            .centers
            .iter()
            .zip(slice_counts(reader, axis_spec, axis)?)
        {
            writeln!(counts_out, "{},{center},{count}", axis.as_str())?;
            count_rows += 1;
        }

        let densities = slice_densities(reader, axis_spec, axis)?;
        let mut out = csv_writer(out_dir, name)?;
        writeln!(out, "center,count,coordinate,density")?;
        let mut rows = 0;
        for d in &densities {
            for (x, y) in d.grid.iter().zip(&d.density) {
                writeln!(out, "{},{},{x},{y}", d.center, d.count)?;
                rows += 1;
            }
        }
        finish(out_dir, name, out, rows)?;
    }
    finish(out_dir, counts_name, counts_out, count_rows)
}

fn fig4_cloud(
    out_dir: &Path,
    reader: &CloudReader,
    table: &IncrementTable,
    scatter_max: u64,
) -> Result<()> {
    if scatter_max == 0 {
        return Err(Error::InvalidInput("--scatter-max must be at least 1".into()));
    }
    let stride = reader.manifest().n_points.div_ceil(scatter_max).max(1);

    let name = "fig4_cloud.csv";
    let mut out = csv_writer(out_dir, name)?;
    writeln!(out, "psi_hat,w_next")?;
    let mut rows = 0;
    for (i, point) in reader.points().enumerate() {
        let p = point?;
        if i as u64 % stride == 0 {
            writeln!(out, "{},{}", p.psi_hat, p.w_next)?;
            rows += 1;
        }
    }
    finish(out_dir, name, out, rows)?;

    let name = "fig4_levels.csv";
    let mut out = csv_writer(out_dir, name)?;
    writeln!(out, "center,t,u_pred,w_pred")?;
    let mut rows = 0;
    for (center, row) in table.centers.iter().zip(&table.u_pred) {
        let Some(row) = row else { continue };
        for (&t, &u) in table.t_levels.iter().zip(row) {
            writeln!(out, "{center},{t},{u},{}", u.asinh())?;
            rows += 1;
        }
    }
    finish(out_dir, name, out, rows)
}

fn fig5_increments(out_dir: &Path, table: &IncrementTable) -> Result<()> {
    let name = "fig5_increments.csv";
    let mut out = csv_writer(out_dir, name)?;
    writeln!(out, "center,t,d_xi,d_psi")?;
    let mut rows = 0;
    for (center, row) in table.centers.iter().zip(&table.d_xi) {
        let Some(row) = row else { continue };
        let xi_c = center.sinh();
        for (&t, &d_xi) in table.t_levels.iter().zip(row) {
            let d_psi = (xi_c + d_xi).asinh() - center;
            writeln!(out, "{center},{t},{d_xi},{d_psi}")?;
            rows += 1;
        }
    }
    finish(out_dir, name, out, rows)
}

fn fig6_extrapolations(out_dir: &Path, table: &IncrementTable, shapes: &[f64]) -> Result<()> {
    let n = table.n;
    let np1 = n as f64 + 1.0;
    let g_half = (n / 2) as f64 / np1;
    // Return-level axis: v = -ln(g_half * t) / ln(g_last / g_half), and
    // the plotting-position ratio g_last / g_half is exactly 2.
    let v_of = |t: f64| -(g_half * t).ln() / std::f64::consts::LN_2;

    // The dense recurrence grid stays inside the table's tabulated range
    // so the increment interpolation is always defined.
    let t_min = table.t_levels[0].max(np1);
    let t_max = *table.t_levels.last().unwrap();
    let er_lo = (t_min / np1).max(1.0);
    let er_hi = t_max / np1;
    let step = 0.25;
    let steps = ((er_hi - er_lo) / step).floor() as usize;

    let name = "fig6_curves.csv";
    let mut out = csv_writer(out_dir, name)?;
    writeln!(out, "xi_hat,t,e_r,v,u_basic,u_calibrated,d_xi")?;
    let mut rows = 0;
    for &xi_hat in shapes {
        let psi_hat = xi_hat.asinh();
        for k in 0..=steps {
            let e_r = er_lo + k as f64 * step;
            let t = e_r * np1;
            let u_basic = level_u(xi_hat, t, n);
            let d_xi = table.increment_at(psi_hat, t)?;
            let u_cal = level_u(xi_hat + d_xi, t, n);
            writeln!(out, "{xi_hat},{t},{e_r},{},{u_basic},{u_cal},{d_xi}", v_of(t))?;
            rows += 1;
        }
    }
    finish(out_dir, name, out, rows)?;

    // Within-sample anchors: the model curve at prediction plotting
    // positions, one point per rank.
    let name = "fig6_ranks.csv";
    let mut out = csv_writer(out_dir, name)?;
    writeln!(out, "xi_hat,rank,g,v,u_rank")?;
    let mut rows = 0;
    for &xi_hat in shapes {
        for i in 1..=n {
            let g = i as f64 / np1;
            let u = model_curve(xi_hat, i, n, Plotting::Prediction);
            writeln!(out, "{xi_hat},{i},{g},{},{u}", v_of(1.0 / g))?;
            rows += 1;
        }
    }
    finish(out_dir, name, out, rows)
}

fn fig7_performance(
    out_dir: &Path,
    table: &IncrementTable,
    reader: &CloudReader,
    t_levels: &[f64],
) -> Result<()> {
    let spec = SliceSpec {
        width: table.slice_width,
        centers: table.centers.clone(),
        min_points: 1,
    };
    let jobs: [(&str, Box<dyn Fn() -> Result<ppp_core::validate::ExceedanceReport> + '_>); 3] = [
        (
            "fig7_vertical_calibrated.csv",
            Box::new(|| validate_vertical(table, reader, &spec, t_levels)),
        ),
        (
            "fig7_horizontal_calibrated.csv",
            Box::new(|| validate_horizontal(table, reader, &spec, t_levels)),
        ),
        (
            "fig7_vertical_basic.csv",
            Box::new(|| basic_vertical(reader, &spec, t_levels, table.n)),
        ),
    ];
    for (name, job) in &jobs {
        let report = job()?;
        let mut out = csv_writer(out_dir, name)?;
        report.write_csv(&mut out)?;
        let rows = report.slice_sizes.iter().filter(|&&s| s > 0).count() * t_levels.len();
        finish(out_dir, name, out, rows)?;
    }
    Ok(())
}

//! Delivered-exceedance measurement.
//!
//! A predictor is probability preserving when the level it quotes for
//! recurrence multiple `T` is exceeded by the next observation with
//! probability `1/T`. This module measures that delivered rate over a
//! cloud, sliced two ways:
//!
//! * vertical slices fix the true shape `psi` and ask how the predictor
//!   performs for a user who actually lives at that shape;
//! * horizontal slices fix the fitted shape `psi_hat`, the quantity the
//!   calibration equalizes, where rates should match `1/T` by
//!   construction.
//!
//! A perfect-knowledge oracle (true quantile at each point's known shape)
//! runs through the same slicing machinery to confirm the harness itself
//! is unbiased.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{substream, CloudConfig, CloudReader};
use crate::error::{Error, Result};
use crate::gpd::GpdParams;
use crate::kde;
use crate::predictor::{level_u, IncrementTable, SliceSpec};

/// Which cloud coordinate defines the slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    /// Slice on the true shape `psi`.
    Vertical,
    /// Slice on the fitted shape `psi_hat`.
    Horizontal,
}

impl SliceAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SliceAxis::Vertical => "vertical",
            SliceAxis::Horizontal => "horizontal",
        }
    }
}

/// Exceedance counts of one validation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExceedanceReport {
    pub axis: SliceAxis,
    pub centers: Vec<f64>,
    pub t_levels: Vec<f64>,
    /// Points per slice that received predictions.
    pub slice_sizes: Vec<u64>,
    /// Points per slice skipped because their `psi_hat` fell outside the
    /// table.
    pub skipped: Vec<u64>,
    /// Exceedances per slice and recurrence multiple.
    pub counts: Vec<Vec<u64>>,
    /// `counts / slice_sizes`; `NaN` for empty slices.
    pub rates: Vec<Vec<f64>>,
    /// Seed of the cloud the measurement ran over.
    pub cloud_seed: u64,
}

/// Pooled delivered rate across a band of slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledRate {
    pub t: f64,
    pub size: u64,
    pub count: u64,
    pub rate: f64,
}

impl ExceedanceReport {
    /// Binomial standard error of the delivered rate in one cell, under
    /// the nominal probability `1/t`.
    pub fn standard_error(&self, center_idx: usize, t_idx: usize) -> f64 {
        let m = self.slice_sizes[center_idx] as f64;
        if m == 0.0 {
            return f64::NAN;
        }
        let p = 1.0 / self.t_levels[t_idx];
        (p * (1.0 - p) / m).sqrt()
    }

    /// Pools counts over slices whose center lies in `[lo, hi]`.
    pub fn pooled(&self, lo: f64, hi: f64) -> Vec<PooledRate> {
        self.t_levels
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let mut size = 0u64;
                let mut count = 0u64;
                for (i, &c) in self.centers.iter().enumerate() {
                    if c >= lo && c <= hi {
                        size += self.slice_sizes[i];
                        count += self.counts[i][j];
                    }
                }
                PooledRate {
                    t,
                    size,
                    count,
                    rate: count as f64 / size as f64,
                }
            })
            .collect()
    }

    /// One row per occupied slice and recurrence multiple.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "axis,center,t,count,size,rate,se")?;
        for (i, &center) in self.centers.iter().enumerate() {
            if self.slice_sizes[i] == 0 {
                continue;
            }
            for (j, &t) in self.t_levels.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.axis.as_str(),
                    center,
                    t,
                    self.counts[i][j],
                    self.slice_sizes[i],
                    self.rates[i][j],
                    self.standard_error(i, j),
                )?;
            }
        }
        Ok(())
    }

    pub fn write_json(&self, out: &mut impl std::io::Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)
            .map_err(|e| Error::Numeric(format!("report serialization failed: {e}")))?;
        writeln!(out)?;
        Ok(())
    }
}

/// Per-slice tallies while streaming a cloud.
struct Tally {
    sizes: Vec<u64>,
    skipped: Vec<u64>,
    counts: Vec<Vec<u64>>,
}

impl Tally {
    fn new(n_centers: usize, n_levels: usize) -> Self {
        Self {
            sizes: vec![0; n_centers],
            skipped: vec![0; n_centers],
            counts: vec![vec![0; n_levels]; n_centers],
        }
    }

    fn absorb(&mut self, other: Tally) {
        for (a, b) in self.sizes.iter_mut().zip(other.sizes) {
            *a += b;
        }
        for (a, b) in self.skipped.iter_mut().zip(other.skipped) {
            *a += b;
        }
        for (row, other_row) in self.counts.iter_mut().zip(other.counts) {
            for (a, b) in row.iter_mut().zip(other_row) {
                *a += b;
            }
        }
    }

    fn into_report(self, axis: SliceAxis, spec: &SliceSpec, t_levels: &[f64], seed: u64) -> ExceedanceReport {
        let rates = self
            .counts
            .iter()
            .zip(&self.sizes)
            .map(|(row, &m)| {
                row.iter()
                    .map(|&c| c as f64 / m as f64) // 0/0 gives NaN for empty slices
                    .collect()
            })
            .collect();
        ExceedanceReport {
            axis,
            centers: spec.centers.clone(),
            t_levels: t_levels.to_vec(),
            slice_sizes: self.sizes,
            skipped: self.skipped,
            counts: self.counts,
            rates,
            cloud_seed: seed,
        }
    }
}

/// Thresholds on the w scale for one estimate value, one per recurrence
/// multiple, or `None` when the estimate falls outside the table's range.
fn point_thresholds(table: &IncrementTable, psi_hat: f64, t_levels: &[f64]) -> Result<Option<Vec<f64>>> {
    let mut thresholds = Vec::with_capacity(t_levels.len());
    for &t in t_levels {
        match table.increment_at(psi_hat, t) {
            Ok(d) => {
                let u = level_u(psi_hat.sinh() + d, t, table.n);
                thresholds.push(u.asinh());
            }
            Err(Error::OutOfRange { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(thresholds))
}

fn run_slices(
    table: &IncrementTable,
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
    axis: SliceAxis,
) -> Result<Tally> {
    // A horizontal slice is the unit the table was built from: its stored
    // level is the quantile of exactly this group, so every member is
    // measured against the level at the slice center. Interpolating at each
    // member's own estimate would raise the bar on the side of the slice
    // where exceedances concentrate and deflate the delivered rate wherever
    // the level changes quickly across one slice width. Vertical slices
    // group by the true shape instead, so each member keeps the prediction
    // at its own estimate, as a practitioner would.
    let slice_thresholds: Option<Vec<Option<Vec<f64>>>> = match axis {
        SliceAxis::Vertical => None,
        SliceAxis::Horizontal => Some(
            spec.centers
                .iter()
                .map(|&c| point_thresholds(table, c, t_levels))
                .collect::<Result<_>>()?,
        ),
    };
    reader.fold_chunks(
        |points| {
            let mut tally = Tally::new(spec.centers.len(), t_levels.len());
            for p in &points {
                let coord = match axis {
                    SliceAxis::Vertical => p.psi,
                    SliceAxis::Horizontal => p.psi_hat,
                };
                let Some(k) = spec.slice_index(coord) else {
                    continue;
                };
                let shared;
                let thresholds = match &slice_thresholds {
                    Some(rows) => &rows[k],
                    None => {
                        shared = point_thresholds(table, p.psi_hat, t_levels)?;
                        &shared
                    }
                };
                let Some(thresholds) = thresholds else {
                    tally.skipped[k] += 1;
                    continue;
                };
                tally.sizes[k] += 1;
                for (j, &w_thresh) in thresholds.iter().enumerate() {
                    if p.w_next > w_thresh {
                        tally.counts[k][j] += 1;
                    }
                }
            }
            Ok(tally)
        },
        Tally::new(spec.centers.len(), t_levels.len()),
        |acc, part| acc.absorb(part),
    )
}

fn validate_slices(
    table: &IncrementTable,
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
    axis: SliceAxis,
    allow_in_sample: bool,
) -> Result<ExceedanceReport> {
    spec.validate()?;
    crate::predictor::validate_t_levels(t_levels, table.n)?;
    if table.n != reader.manifest().n {
        return Err(Error::InvalidInput(format!(
            "table sample size {} does not match cloud sample size {}",
            table.n,
            reader.manifest().n
        )));
    }
    let seed = reader.manifest().seed;
    if !allow_in_sample && seed == table.build.cloud_seed {
        return Err(Error::SeedReuse { seed });
    }
    let tally = run_slices(table, reader, spec, t_levels, axis)?;
    Ok(tally.into_report(axis, spec, t_levels, seed))
}

/// Delivered exceedance rates on slices of the true shape, measured on a
/// held-out cloud. Reusing the build seed is refused.
pub fn validate_vertical(
    table: &IncrementTable,
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
) -> Result<ExceedanceReport> {
    validate_slices(table, reader, spec, t_levels, SliceAxis::Vertical, false)
}

/// Delivered exceedance rates on slices of the fitted shape, measured on
/// a held-out cloud. Reusing the build seed is refused.
pub fn validate_horizontal(
    table: &IncrementTable,
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
) -> Result<ExceedanceReport> {
    validate_slices(table, reader, spec, t_levels, SliceAxis::Horizontal, false)
}

/// As [`validate_horizontal`] but over the build cloud itself, where the
/// quantile construction makes rates match `1/T` up to interpolation.
/// Reported separately because in-sample agreement is a consistency check,
/// not evidence of calibration.
pub fn validate_horizontal_in_sample(
    table: &IncrementTable,
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
) -> Result<ExceedanceReport> {
    validate_slices(table, reader, spec, t_levels, SliceAxis::Horizontal, true)
}

/// Calibration check of the harness itself: each point is scored against
/// the true `T`-level of its own known-shape distribution, with no fit
/// involved, so every delivered rate is exactly binomial with probability
/// `1/T`.
///
/// The exceedance is decided on the probability scale (`g_next < 1/T`,
/// with `g_next` the same uniform the value draw inverts), which is the
/// exact event. For strongly bounded shapes the value scale cannot decide
/// it: with `xi` a few units negative, every tail quantile past roughly
/// `g^|xi| < 2^-53` rounds to the same float at the distribution's upper
/// endpoint, so the next value and the true level collapse onto one atom
/// and the comparison degenerates. Points are still generated exactly like
/// cloud points, including redrawing samples whose normalization span
/// degenerates.
pub fn oracle_vertical(
    config: &CloudConfig,
    spec: &SliceSpec,
    t_levels: &[f64],
) -> Result<ExceedanceReport> {
    config.validate()?;
    spec.validate()?;
    if t_levels.is_empty() || t_levels.iter().any(|&t| !(t > 1.0)) {
        return Err(Error::InvalidInput(
            "recurrence multiples must exceed 1".into(),
        ));
    }

    let chunk = 65_536u64;
    let n_chunks = config.n_points.div_ceil(chunk);
    let parts: Vec<Tally> = (0..n_chunks)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| -> Result<Tally> {
            let mut tally = Tally::new(spec.centers.len(), t_levels.len());
            let lo = c * chunk;
            let hi = (lo + chunk).min(config.n_points);
            let half = config.n / 2;
            for i in lo..hi {
                let mut rng = substream(config.seed, i);
                let psi = config.psi_min + (config.psi_max - config.psi_min) * rng.random::<f64>();
                let params = GpdParams::standard(psi.sinh());

                // Reproduce the cloud's accepted-sample population: redraw
                // the whole sample on the (measure-zero) degenerate spans
                // the fit path rejects.
                let mut accepted = false;
                for _ in 0..100 {
                    let mut draws = params.sample(&mut rng, config.n);
                    draws.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
                    if draws[half - 1] - draws[config.n - 1] > 0.0 {
                        accepted = true;
                        break;
                    }
                }
                if !accepted {
                    return Err(Error::Numeric(format!(
                        "persistent degenerate draws at point {i}"
                    )));
                }
                // The uniform behind the next value draw; `x_next` exceeds
                // the level at exceedance probability `g` iff `g_next < g`.
                let g_next = 1.0 - rng.random::<f64>();

                let Some(k) = spec.slice_index(psi) else {
                    continue;
                };
                tally.sizes[k] += 1;
                for (j, &t) in t_levels.iter().enumerate() {
                    if g_next < 1.0 / t {
                        tally.counts[k][j] += 1;
                    }
                }
            }
            Ok(tally)
        })
        .collect::<Result<_>>()?;

    let mut tally = Tally::new(spec.centers.len(), t_levels.len());
    for part in parts {
        tally.absorb(part);
    }
    Ok(tally.into_report(SliceAxis::Vertical, spec, t_levels, config.seed))
}

/// Sampling-distribution deciles of the fitted shape along a grid of true
/// shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DecileCurves {
    pub psi_grid: Vec<f64>,
    pub reps: usize,
    /// Deciles 10% .. 90% of `psi_hat` per grid point.
    pub deciles_psi: Vec<[f64; 9]>,
}

impl DecileCurves {
    /// The same curves mapped back to the shape scale.
    pub fn deciles_xi(&self) -> Vec<[f64; 9]> {
        self.deciles_psi
            .iter()
            .map(|row| row.map(f64::sinh))
            .collect()
    }
}

/// Estimates `psi_hat` deciles by repeated fitting of fresh samples at
/// each true shape. Needs at least 1000 replicates per grid point for the
/// outer deciles to stabilize.
pub fn estimator_deciles(
    psi_grid: &[f64],
    reps: usize,
    seed: u64,
    n: usize,
) -> Result<DecileCurves> {
    if psi_grid.is_empty() || psi_grid.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("bad psi grid".into()));
    }
    if reps < 1000 {
        return Err(Error::InvalidInput(format!(
            "decile curves need at least 1000 replicates per grid point, got {reps}"
        )));
    }
    let deciles_psi: Vec<[f64; 9]> = psi_grid
        .par_iter()
        .enumerate()
        .map(|(gi, &psi)| -> Result<[f64; 9]> {
            let params = GpdParams::standard(psi.sinh());
            let mut hats = Vec::with_capacity(reps);
            for rep in 0..reps {
                let mut rng = substream(seed, ((gi as u64) << 32) | rep as u64);
                let (_, est, _) = crate::cloud::sample_and_fit(&params, &mut rng, n)?;
                hats.push(est.psi_hat);
            }
            hats.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let mut out = [0.0; 9];
            for (d, slot) in out.iter_mut().enumerate() {
                let p = (d + 1) as f64 / 10.0;
                let h = p * (reps - 1) as f64;
                let k = h.floor() as usize;
                *slot = if k + 1 < reps {
                    hats[k] + (h - k as f64) * (hats[k + 1] - hats[k])
                } else {
                    hats[reps - 1]
                };
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(DecileCurves {
        psi_grid: psi_grid.to_vec(),
        reps,
        deciles_psi,
    })
}

/// Kernel density of one slice's transverse coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDensity {
    pub center: f64,
    pub count: u64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Gaussian KDE of the transverse coordinate in each occupied slice:
/// vertical slices show the spread of `psi_hat` at fixed `psi`,
/// horizontal slices the spread of `psi` at fixed `psi_hat`. Slices with
/// fewer than `spec.min_points` points (or without spread) are omitted.
pub fn slice_densities(
    reader: &CloudReader,
    spec: &SliceSpec,
    axis: SliceAxis,
) -> Result<Vec<SliceDensity>> {
    spec.validate()?;
    let values: Vec<Vec<f64>> = reader.fold_chunks(
        |points| {
            let mut acc = vec![Vec::new(); spec.centers.len()];
            for p in &points {
                let (coord, transverse) = match axis {
                    SliceAxis::Vertical => (p.psi, p.psi_hat),
                    SliceAxis::Horizontal => (p.psi_hat, p.psi),
                };
                if let Some(k) = spec.slice_index(coord) {
                    acc[k].push(transverse);
                }
            }
            Ok(acc)
        },
        vec![Vec::new(); spec.centers.len()],
        |acc: &mut Vec<Vec<f64>>, part| {
            for (a, b) in acc.iter_mut().zip(part) {
                a.extend(b);
            }
        },
    )?;

    let mut out = Vec::new();
    for (i, vals) in values.into_iter().enumerate() {
        if vals.len() < spec.min_points.max(2) {
            continue;
        }
        let bw = kde::silverman_bandwidth(&vals);
        if !(bw > 0.0) {
            continue;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let (lo, hi) = (lo - 4.0 * bw, hi + 4.0 * bw);
        let grid: Vec<f64> = (0..256)
            .map(|k| lo + (hi - lo) * k as f64 / 255.0)
            .collect();
        let density = kde::density_on_grid(&vals, &grid, bw)?;
        out.push(SliceDensity {
            center: spec.centers[i],
            count: vals.len() as u64,
            grid,
            density,
        });
    }
    Ok(out)
}

/// Exceedance rates of the naive plug-in predictor (increment zero),
/// measured the same way as the calibrated one. Used for comparisons.
pub fn basic_vertical(
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
    n: usize,
) -> Result<ExceedanceReport> {
    spec.validate()?;
    crate::predictor::validate_t_levels(t_levels, n)?;
    let tally = reader.fold_chunks(
        |points| {
            let mut tally = Tally::new(spec.centers.len(), t_levels.len());
            for p in &points {
                let Some(k) = spec.slice_index(p.psi) else {
                    continue;
                };
                tally.sizes[k] += 1;
                for (j, &t) in t_levels.iter().enumerate() {
                    let w_thresh = level_u(p.psi_hat.sinh(), t, n).asinh();
                    if p.w_next > w_thresh {
                        tally.counts[k][j] += 1;
                    }
                }
            }
            Ok(tally)
        },
        Tally::new(spec.centers.len(), t_levels.len()),
        |acc, part| acc.absorb(part),
    )?;
    Ok(tally.into_report(SliceAxis::Vertical, spec, t_levels, reader.manifest().seed))
}

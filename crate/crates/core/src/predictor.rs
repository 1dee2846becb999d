//! Shape increments that make predicted levels carry their nominal
//! exceedance probability.
//!
//! The cloud is cut into slices of constant fitted shape `psi_hat`. Within
//! a slice, the observed singletons `w_next` form the predictive
//! distribution actually delivered by samples that fit to that shape; the
//! upper `1/T` quantile of that distribution is the level a calibrated
//! predictor should quote for recurrence multiple `T`. Mapping that
//! quantile back through the analytic level curve
//!
//! ```text
//! u(xi, T) = ((G_{n/2} T)^xi - 1) / (1 - (G_{n/2} / G_n)^xi)
//! ```
//!
//! (prediction plotting positions, `G_j = j/(n+1)`) yields the shape
//! `xi_p` whose plug-in level equals the calibrated one. The table stores
//! the increment `d_xi = xi_p - sinh(center)` per slice center and `T`, so
//! a prediction for a fresh sample is `level at (xi_hat + d_xi)` rescaled
//! by the sample's own normalization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::cloud::{CloudPoint, CloudReader};
use crate::error::{Error, Result};
use crate::estimator::{curve_ratio, fit_xi, plotting_position, OrderedSample, Plotting, TailEstimate};
use crate::kde;
use crate::search;

/// Recurrence multiples tabulated by default.
pub const T_LEVELS_DEFAULT: [f64; 5] = [21.0, 50.0, 100.0, 200.0, 400.0];

pub const TABLE_VERSION: u32 = 1;

/// How a slice's upper tail quantile is extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMode {
    /// Linear interpolation between order statistics at fractional rank
    /// `(m + 1) / T` from the top.
    OrderStat,
    /// Quantile of the Gaussian-smoothed empirical distribution.
    Kde,
}

impl QuantileMode {
    fn as_str(self) -> &'static str {
        match self {
            QuantileMode::OrderStat => "order-stat",
            QuantileMode::Kde => "kde",
        }
    }
}

/// Slicing geometry: fixed-width windows around an increasing list of
/// centers. A value belongs to the nearest center if it lies strictly
/// inside that window; exact midpoints between adjacent centers belong to
/// neither.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    pub width: f64,
    pub centers: Vec<f64>,
    /// Slices with fewer points than this are treated as absent.
    pub min_points: usize,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            width: 0.1,
            centers: centers_range(-3.0, 3.0, 0.1),
            min_points: 200,
        }
    }
}

impl SliceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "slice width must be positive and finite, got {}",
                self.width
            )));
        }
        if self.centers.is_empty() {
            return Err(Error::InvalidInput("no slice centers given".into()));
        }
        if self.centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite slice center".into()));
        }
        if self.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "slice centers must be strictly increasing".into(),
            ));
        }
        if self.min_points == 0 {
            return Err(Error::InvalidInput("min_points must be at least 1".into()));
        }
        Ok(())
    }

    /// Index of the slice containing `v`, if any.
    pub fn slice_index(&self, v: f64) -> Option<usize> {
        let after = self.centers.partition_point(|&c| c < v);
        let mut best: Option<usize> = None;
        for cand in [after.wrapping_sub(1), after] {
            if let Some(&c) = self.centers.get(cand) {
                if (v - c).abs() < self.width / 2.0
                    && best.map_or(true, |b| (v - c).abs() < (v - self.centers[b]).abs())
                {
                    best = Some(cand);
                }
            }
        }
        best
    }

    /// Inclusive coverage bounds: half a width beyond the outer centers.
    pub fn coverage(&self) -> (f64, f64) {
        (
            self.centers[0] - self.width / 2.0,
            self.centers[self.centers.len() - 1] + self.width / 2.0,
        )
    }
}

/// Evenly spaced centers `min, min+step, ..., max` built from integer
/// multiples of `step` so grid values are reproducible.
pub fn centers_range(min: f64, max: f64, step: f64) -> Vec<f64> {
    let k_lo = (min / step).round() as i64;
    let k_hi = (max / step).round() as i64;
    (k_lo..=k_hi).map(|k| k as f64 * step).collect()
}

/// Analytic level curve: normalized level with exceedance probability
/// `1/t` under shape `xi`, for sample size `n` with prediction plotting
/// positions. Requires `t >= n + 1` (levels at or beyond the expected
/// sample maximum); strictly increasing in both `xi` and `t`.
pub fn level_u(xi: f64, t: f64, n: usize) -> f64 {
    debug_assert!(t >= (n + 1) as f64);
    let half = n / 2;
    let g_half = plotting_position(half, n, Plotting::Prediction);
    let g_n = plotting_position(n, n, Plotting::Prediction);
    curve_ratio(xi, (g_half * t).ln(), (g_half / g_n).ln())
}

/// Inverts [`level_u`] in `xi` at fixed `t`: the shape whose analytic
/// level equals `u_target`.
///
/// Searches an expanding bracket out to `xi` in `[-50, 50]` and bisects to
/// a value tolerance of `1e-10 * max(1, |u_target|)`. Targets at or below
/// the curve's infimum (for example any `u_target <= 0`) fail with
/// [`Error::NoSolution`].
pub fn invert_level_u(u_target: f64, t: f64, n: usize) -> Result<f64> {
    if !(t >= (n + 1) as f64) {
        return Err(Error::InvalidInput(format!(
            "recurrence multiple must be at least n + 1 = {}, got {t}",
            n + 1
        )));
    }
    if !u_target.is_finite() {
        return Err(Error::InvalidInput(format!(
            "level value must be finite, got {u_target}"
        )));
    }
    let f = |xi: f64| level_u(xi, t, n);
    let no_solution = || Error::NoSolution { u_target, t };

    let mut lo = -5.0f64;
    while f(lo) > u_target {
        if lo <= -50.0 {
            return Err(no_solution());
        }
        lo = (lo * 2.0).max(-50.0);
    }
    let mut hi = 5.0f64;
    while f(hi) < u_target {
        if hi >= 50.0 {
            return Err(no_solution());
        }
        hi = (hi * 2.0).min(50.0);
    }
    let tol = 1e-10 * u_target.abs().max(1.0);
    search::bisect_to_value(f, lo, hi, u_target, tol)
        .ok_or_else(|| Error::Numeric(format!("level inversion stalled at u = {u_target}, T = {t}")))
}

/// Upper `1/t` quantile of `sorted_desc` by linear interpolation between
/// order statistics at fractional rank `h = (m + 1) / t` from the top.
/// Ranks clamp to the observed range, so `t` beyond `m + 1` returns the
/// maximum.
fn upper_quantile(sorted_desc: &[f64], t: f64) -> f64 {
    let m = sorted_desc.len();
    debug_assert!(m >= 1 && t > 1.0);
    let h = (m as f64 + 1.0) / t;
    if h <= 1.0 {
        return sorted_desc[0];
    }
    let k = h.floor() as usize;
    if k >= m {
        return sorted_desc[m - 1];
    }
    let frac = h - k as f64;
    sorted_desc[k - 1] + frac * (sorted_desc[k] - sorted_desc[k - 1])
}

pub(crate) fn validate_t_levels(t_levels: &[f64], n: usize) -> Result<()> {
    if t_levels.is_empty() {
        return Err(Error::InvalidInput("no recurrence multiples given".into()));
    }
    if t_levels.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite recurrence multiple".into()));
    }
    if t_levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "recurrence multiples must be strictly increasing".into(),
        ));
    }
    if t_levels[0] < (n + 1) as f64 {
        return Err(Error::InvalidInput(format!(
            "recurrence multiples must be at least n + 1 = {}, got {}",
            n + 1,
            t_levels[0]
        )));
    }
    Ok(())
}

/// Per-slice accumulation of `w_next` values keyed by slice coordinate.
pub(crate) struct SliceGather<'s> {
    spec: &'s SliceSpec,
    values: Vec<Vec<f64>>,
}

impl<'s> SliceGather<'s> {
    pub(crate) fn new(spec: &'s SliceSpec) -> Self {
        Self {
            spec,
            values: vec![Vec::new(); spec.centers.len()],
        }
    }

    pub(crate) fn add(&mut self, coord: f64, w: f64) {
        if let Some(k) = self.spec.slice_index(coord) {
            self.values[k].push(w);
        }
    }

    pub(crate) fn merge(&mut self, other: SliceGather<'s>) {
        for (mine, theirs) in self.values.iter_mut().zip(other.values) {
            mine.extend(theirs);
        }
    }
}

/// Slice occupancy and per-slice upper-tail quantiles on the `w` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceQuantiles {
    pub counts: Vec<u64>,
    /// One row per center; `None` below the occupancy threshold.
    pub w_rows: Vec<Option<Vec<f64>>>,
}

fn finish_quantiles(
    gather: SliceGather<'_>,
    t_levels: &[f64],
    mode: QuantileMode,
) -> Result<SliceQuantiles> {
    let min_points = gather.spec.min_points;
    let mut counts = Vec::with_capacity(gather.values.len());
    let mut w_rows = Vec::with_capacity(gather.values.len());
    for mut vals in gather.values {
        counts.push(vals.len() as u64);
        if vals.len() < min_points {
            w_rows.push(None);
            continue;
        }
        let row = match mode {
            QuantileMode::OrderStat => {
                vals.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
                t_levels.iter().map(|&t| upper_quantile(&vals, t)).collect()
            }
            QuantileMode::Kde => t_levels
                .iter()
                .map(|&t| kde::smoothed_upper_quantile(&vals, 1.0 / t))
                .collect::<Result<Vec<f64>>>()?,
        };
        w_rows.push(Some(row));
    }
    Ok(SliceQuantiles { counts, w_rows })
}

/// Slices a stream of points on `psi_hat` and extracts per-slice upper
/// `1/T` quantiles of `w_next` for each requested `T`.
pub fn slice_quantiles(
    points: impl Iterator<Item = Result<CloudPoint>>,
    spec: &SliceSpec,
    t_levels: &[f64],
    mode: QuantileMode,
) -> Result<SliceQuantiles> {
    spec.validate()?;
    if t_levels.is_empty() || t_levels.iter().any(|&t| !(t > 1.0)) {
        return Err(Error::InvalidInput(
            "recurrence multiples must exceed 1".into(),
        ));
    }
    let mut gather = SliceGather::new(spec);
    for point in points {
        let p = point?;
        gather.add(p.psi_hat, p.w_next);
    }
    finish_quantiles(gather, t_levels, mode)
}

/// Provenance of a built table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BuildInfo {
    /// Hex SHA-256 of the source cloud's manifest.
    pub cloud_manifest_hash: String,
    pub cloud_seed: u64,
    pub quantile_mode: QuantileMode,
}

/// Calibrated shape increments on a grid of slice centers and recurrence
/// multiples.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct IncrementTable {
    pub version: u32,
    /// Sample size the table applies to.
    pub n: usize,
    pub t_levels: Vec<f64>,
    pub slice_width: f64,
    pub centers: Vec<f64>,
    /// Points that landed in each slice during the build.
    pub counts: Vec<u64>,
    /// `d_xi[center][t]`; `None` marks an absent slice.
    pub d_xi: Vec<Option<Vec<f64>>>,
    /// Calibrated normalized level per center and `t`, `None` as above.
    pub u_pred: Vec<Option<Vec<f64>>>,
    pub build: BuildInfo,
}

impl IncrementTable {
    fn check(&self) -> std::result::Result<(), String> {
        if self.version != TABLE_VERSION {
            return Err(format!("unsupported table version {}", self.version));
        }
        if self.n < 4 || self.n % 2 != 0 {
            return Err(format!("sample size must be even and at least 4, got {}", self.n));
        }
        if validate_t_levels(&self.t_levels, self.n).is_err() {
            return Err("bad recurrence multiples".into());
        }
        if !(self.slice_width > 0.0 && self.slice_width.is_finite()) {
            return Err(format!("bad slice width {}", self.slice_width));
        }
        if self.centers.is_empty() || self.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err("centers must be nonempty and strictly increasing".into());
        }
        let k = self.centers.len();
        if self.counts.len() != k || self.d_xi.len() != k || self.u_pred.len() != k {
            return Err("column lengths disagree with centers".into());
        }
        for (i, (d, u)) in self.d_xi.iter().zip(&self.u_pred).enumerate() {
            match (d, u) {
                (None, None) => {}
                (Some(d), Some(u)) => {
                    if d.len() != self.t_levels.len() || u.len() != self.t_levels.len() {
                        return Err(format!("row {i} length disagrees with t_levels"));
                    }
                    if d.iter().chain(u).any(|v| !v.is_finite()) {
                        return Err(format!("row {i} contains non-finite values"));
                    }
                    if u.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(format!(
                            "levels at center {} are not strictly increasing in T",
                            self.centers[i]
                        ));
                    }
                }
                _ => return Err(format!("row {i} mixes present and absent entries")),
            }
        }
        Ok(())
    }

    /// Recomputes every stored level from its increment and reports the
    /// largest relative deviation. A freshly built or faithfully loaded
    /// table stays at rounding level; anything larger means the table was
    /// edited or corrupted.
    pub fn audit(&self) -> Result<f64> {
        self.check().map_err(Error::Numeric)?;
        let mut worst = 0.0f64;
        for (i, (d_row, u_row)) in self.d_xi.iter().zip(&self.u_pred).enumerate() {
            let (Some(d_row), Some(u_row)) = (d_row, u_row) else {
                continue;
            };
            let xi_c = self.centers[i].sinh();
            for ((&d, &u), &t) in d_row.iter().zip(u_row).zip(&self.t_levels) {
                let again = level_u(xi_c + d, t, self.n);
                let dev = (again - u).abs() / u.abs().max(1.0);
                worst = worst.max(dev);
            }
        }
        Ok(worst)
    }

    fn spec_bounds(&self) -> (f64, f64) {
        (
            self.centers[0] - self.slice_width / 2.0,
            self.centers[self.centers.len() - 1] + self.slice_width / 2.0,
        )
    }

    fn row(&self, i: usize, psi_hat: f64) -> Result<&[f64]> {
        self.d_xi[i].as_deref().ok_or_else(|| {
            let (min, max) = self.spec_bounds();
            Error::OutOfRange { psi_hat, min, max }
        })
    }

    /// Increment for one fitted shape, interpolated linearly in `psi_hat`
    /// between slice centers and linearly in `ln T` between tabulated
    /// multiples. The half-slice margins beyond the outer centers reuse
    /// the edge value; queries under an absent slice or outside the
    /// covered ranges fail.
    pub fn increment_at(&self, psi_hat: f64, t: f64) -> Result<f64> {
        if !psi_hat.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite psi_hat {psi_hat}")));
        }
        let (min, max) = self.spec_bounds();
        if psi_hat < min || psi_hat > max {
            return Err(Error::OutOfRange { psi_hat, min, max });
        }
        let t_first = self.t_levels[0];
        let t_last = self.t_levels[self.t_levels.len() - 1];
        if !(t >= t_first && t <= t_last) {
            return Err(Error::InvalidInput(format!(
                "recurrence multiple {t} outside the tabulated range [{t_first}, {t_last}]"
            )));
        }

        let at_t = |row: &[f64]| -> f64 {
            match self.t_levels.iter().position(|&lvl| lvl == t) {
                Some(j) => row[j],
                None => {
                    let j = self.t_levels.partition_point(|&lvl| lvl < t) - 1;
                    let lam = (t.ln() - self.t_levels[j].ln())
                        / (self.t_levels[j + 1].ln() - self.t_levels[j].ln());
                    (1.0 - lam) * row[j] + lam * row[j + 1]
                }
            }
        };

        let last = self.centers.len() - 1;
        if psi_hat <= self.centers[0] {
            return Ok(at_t(self.row(0, psi_hat)?));
        }
        if psi_hat >= self.centers[last] {
            return Ok(at_t(self.row(last, psi_hat)?));
        }
        let j = self.centers.partition_point(|&c| c <= psi_hat) - 1;
        let lam = (psi_hat - self.centers[j]) / (self.centers[j + 1] - self.centers[j]);
        if lam == 0.0 {
            // Exactly on a center: the neighbor carries no weight and may
            // legitimately be absent.
            return Ok(at_t(self.row(j, psi_hat)?));
        }
        let lo = at_t(self.row(j, psi_hat)?);
        let hi = at_t(self.row(j + 1, psi_hat)?);
        Ok((1.0 - lam) * lo + lam * hi)
    }

    /// Serializes the table as JSON with every float printed to 17
    /// significant digits, so saved bytes are deterministic and reloads
    /// reproduce each value exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        let fmt = |x: f64| format!("{x:.16e}");
        let float_list = |xs: &[f64]| xs.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(", ");
        let row_list = |rows: &[Option<Vec<f64>>]| -> String {
            rows.iter()
                .map(|r| match r {
                    None => "    null".to_string(),
                    Some(r) => format!("    [{}]", float_list(r)),
                })
                .collect::<Vec<_>>()
                .join(",\n")
        };

        writeln!(out, "{{")?;
        writeln!(out, "  \"version\": {},", self.version)?;
        writeln!(out, "  \"n\": {},", self.n)?;
        writeln!(out, "  \"t_levels\": [{}],", float_list(&self.t_levels))?;
        writeln!(out, "  \"slice_width\": {},", fmt(self.slice_width))?;
        writeln!(out, "  \"centers\": [{}],", float_list(&self.centers))?;
        let counts = self
            .counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        writeln!(out, "  \"counts\": [{counts}],")?;
        writeln!(out, "  \"d_xi\": [\n{}\n  ],", row_list(&self.d_xi))?;
        writeln!(out, "  \"u_pred\": [\n{}\n  ],", row_list(&self.u_pred))?;
        writeln!(out, "  \"build\": {{")?;
        writeln!(
            out,
            "    \"cloud_manifest_hash\": \"{}\",",
            self.build.cloud_manifest_hash
        )?;
        writeln!(out, "    \"cloud_seed\": {},", self.build.cloud_seed)?;
        writeln!(
            out,
            "    \"quantile_mode\": \"{}\"",
            self.build.quantile_mode.as_str()
        )?;
        writeln!(out, "  }}")?;
        writeln!(out, "}}")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let table: IncrementTable = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, e.to_string()))?;
        table.check().map_err(|r| Error::format(path, r))?;
        Ok(table)
    }
}

/// Builds an increment table from a cloud: slice on `psi_hat`, extract the
/// `w` quantiles, and invert the level curve at each center.
pub fn build_table(
    reader: &CloudReader,
    spec: &SliceSpec,
    t_levels: &[f64],
    mode: QuantileMode,
) -> Result<IncrementTable> {
    spec.validate()?;
    let n = reader.manifest().n;
    validate_t_levels(t_levels, n)?;

    // The inversion assumes the level curve rises with the shape; verify
    // that once per build across the tabulated range.
    for &t in t_levels {
        let mut prev = f64::NEG_INFINITY;
        for k in -20..=20 {
            let u = level_u(k as f64 * 2.5, t, n);
            if !(u > prev) {
                return Err(Error::Numeric(format!(
                    "level curve is not increasing in the shape at T = {t}"
                )));
            }
            prev = u;
        }
    }

    let gather = reader.fold_chunks(
        |points| {
            let mut g = SliceGather::new(spec);
            for p in &points {
                g.add(p.psi_hat, p.w_next);
            }
            Ok(g)
        },
        SliceGather::new(spec),
        |acc, part| acc.merge(part),
    )?;
    let quantiles = finish_quantiles(gather, t_levels, mode)?;

    let mut d_xi = Vec::with_capacity(spec.centers.len());
    let mut u_pred = Vec::with_capacity(spec.centers.len());
    for (center, w_row) in spec.centers.iter().zip(&quantiles.w_rows) {
        let Some(w_row) = w_row else {
            d_xi.push(None);
            u_pred.push(None);
            continue;
        };
        let xi_c = center.sinh();
        let mut d_row = Vec::with_capacity(t_levels.len());
        let mut u_row = Vec::with_capacity(t_levels.len());
        for (&w, &t) in w_row.iter().zip(t_levels) {
            let u = w.sinh();
            let xi_p = invert_level_u(u, t, n)?;
            d_row.push(xi_p - xi_c);
            u_row.push(u);
        }
        d_xi.push(Some(d_row));
        u_pred.push(Some(u_row));
    }

    let table = IncrementTable {
        version: TABLE_VERSION,
        n,
        t_levels: t_levels.to_vec(),
        slice_width: spec.width,
        centers: spec.centers.clone(),
        counts: quantiles.counts,
        d_xi,
        u_pred,
        build: BuildInfo {
            cloud_manifest_hash: reader.manifest_hash()?,
            cloud_seed: reader.manifest().seed,
            quantile_mode: mode,
        },
    };
    table.check().map_err(Error::Numeric)?;
    Ok(table)
}

/// One calibrated prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub t: f64,
    /// Increment applied to the fitted shape.
    pub d_xi: f64,
    /// Calibrated shape `xi_hat + d_xi`.
    pub xi_p: f64,
    /// Predicted level in the sample's normalized coordinates.
    pub u_pred: f64,
    /// Predicted level on the sample's original scale.
    pub x_pred: f64,
}

/// Calibrated level for a fitted shape in normalized coordinates.
pub fn predict_normalized(table: &IncrementTable, psi_hat: f64, t: f64) -> Result<Prediction> {
    let d_xi = table.increment_at(psi_hat, t)?;
    let xi_p = psi_hat.sinh() + d_xi;
    let u_pred = level_u(xi_p, t, table.n);
    Ok(Prediction {
        t,
        d_xi,
        xi_p,
        u_pred,
        x_pred: u_pred,
    })
}

/// Fits `sample` and returns its calibrated levels at each requested
/// recurrence multiple, on the sample's own scale.
pub fn predict(
    table: &IncrementTable,
    sample: &OrderedSample,
    ts: &[f64],
) -> Result<(TailEstimate, Vec<Prediction>)> {
    if sample.n() != table.n {
        return Err(Error::InvalidInput(format!(
            "table was built for samples of size {}, got {}",
            table.n,
            sample.n()
        )));
    }
    let est = fit_xi(sample)?;
    let predictions = ts
        .iter()
        .map(|&t| {
            let d_xi = table.increment_at(est.psi_hat, t)?;
            let xi_p = est.xi_hat + d_xi;
            let u_pred = level_u(xi_p, t, table.n);
            Ok(Prediction {
                t,
                d_xi,
                xi_p,
                u_pred,
                x_pred: sample.x_mid() + u_pred * sample.span(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((est, predictions))
}

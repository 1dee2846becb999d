//! Gaussian kernel density estimation with the Silverman bandwidth rule,
//! plus quantiles of the smoothed distribution. Used for slice-density
//! diagnostics and as the optional smoothed quantile mode.

use crate::error::{Error, Result};
use crate::search;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal upper-tail probability `P(Z > z)`.
fn normal_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Type-7 (linear interpolation) quantile of sorted ascending `values`.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let h = p * (m - 1) as f64;
    let k = h.floor() as usize;
    if k + 1 >= m {
        return sorted[m - 1];
    }
    sorted[k] + (h - k as f64) * (sorted[k + 1] - sorted[k])
}

/// Silverman's rule of thumb, `0.9 min(sd, iqr/1.34) m^(-1/5)`.
///
/// Returns zero when the sample has no spread; callers treat that case as
/// a point mass.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 {
        sd.min(iqr / 1.34)
    } else {
        sd
    };
    0.9 * spread * (m as f64).powf(-0.2)
}

/// Gaussian KDE evaluated on `grid` with bandwidth `bw`.
pub fn density_on_grid(values: &[f64], grid: &[f64], bw: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("KDE needs at least one value".into()));
    }
    if !(bw > 0.0) {
        return Err(Error::InvalidInput(format!(
            "KDE bandwidth must be positive, got {bw}"
        )));
    }
    let norm = 1.0 / (values.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            let mut acc = 0.0;
            for &v in values {
                let z = (g - v) / bw;
                acc += (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect())
}

/// Level exceeded with probability `tail` under the smoothed distribution:
/// the solution `v` of `mean_i P(v + bw Z > ... )`, i.e. of
/// `(1/m) sum_i Phi_bar((v - w_i)/bw) = tail`.
///
/// Degenerate inputs with zero spread return the common value.
pub fn smoothed_upper_quantile(values: &[f64], tail: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty set".into()));
    }
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::InvalidInput(format!(
            "tail probability must lie in (0, 1), got {tail}"
        )));
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    let bw = silverman_bandwidth(values);
    if !(bw > 0.0) {
        return Ok(values[0]);
    }
    let smoothed_tail = |v: f64| {
        values
            .iter()
            .map(|&w| normal_tail((v - w) / bw))
            .sum::<f64>()
            / values.len() as f64
    };
    // The smoothed tail is decreasing in v; negate to use the increasing
    // bisection helper.
    let lo = min - 10.0 * bw;
    let hi = max + 10.0 * bw;
    search::bisect_to_value(|v| -smoothed_tail(v), lo, hi, -tail, 1e-12 * tail)
        .ok_or_else(|| Error::Numeric("smoothed quantile bisection stalled".into()))
}

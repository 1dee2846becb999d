//! Generalized Pareto tail model.
//!
//! The exceedance probability of a level `x` above the threshold `mu` is
//!
//! ```text
//! G(x) = (1 + xi (x - mu) / sigma)^(-1/xi)        xi != 0
//! G(x) = exp(-(x - mu) / sigma)                   xi -> 0
//! ```
//!
//! with scale `sigma > 0` and shape `xi`. For `xi < 0` the support is the
//! finite interval `[mu, mu - sigma/xi]`; otherwise it is `[mu, inf)`.
//! Near `xi = 0` both the exceedance probability and its inverse are
//! evaluated through second-order series in `xi` so that the two branches
//! join smoothly instead of cancelling catastrophically.

use rand::Rng;

use crate::error::{Error, Result};

/// Shape magnitude below which the exponential-limit series is used.
pub(crate) const XI_SERIES_THRESHOLD: f64 = 1e-6;

/// Location, scale, and shape of a generalized Pareto tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdParams {
    mu: f64,
    sigma: f64,
    xi: f64,
}

impl GpdParams {
    /// Validates and wraps the parameter triple.
    ///
    /// `sigma` must be strictly positive and all three values finite.
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || !xi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "GPD parameters must be finite, got mu = {mu}, sigma = {sigma}, xi = {xi}"
            )));
        }
        if sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "GPD scale must be positive, got sigma = {sigma}"
            )));
        }
        Ok(Self { mu, sigma, xi })
    }

    /// Canonical tail with `mu = 0`, `sigma = 1`.
    pub fn standard(xi: f64) -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            xi,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Upper endpoint of the support, finite only for negative shapes.
    pub fn upper_bound(&self) -> Option<f64> {
        (self.xi < 0.0).then(|| self.mu - self.sigma / self.xi)
    }

    /// Exceedance probability `G(x) = P(X > x)`.
    ///
    /// Errors with [`Error::OutOfSupport`] when `x < mu` or, for negative
    /// shapes, when `x` lies beyond the finite upper endpoint.
    pub fn tail_prob(&self, x: f64) -> Result<f64> {
        let z = (x - self.mu) / self.sigma;
        if !(z >= 0.0) {
            return Err(Error::OutOfSupport { x });
        }
        let xz = self.xi * z;
        if xz < -1.0 {
            return Err(Error::OutOfSupport { x });
        }
        if self.xi.abs() < XI_SERIES_THRESHOLD {
            // ln(1 + xi z)/xi expanded to second order in xi.
            Ok((-z * (1.0 - xz / 2.0 + xz * xz / 3.0)).exp())
        } else {
            Ok((-xz.ln_1p() / self.xi).exp())
        }
    }

    /// Level exceeded with probability `g`, the inverse of [`tail_prob`].
    ///
    /// `g` must lie in `(0, 1]`; `g = 1` returns `mu` exactly.
    ///
    /// [`tail_prob`]: GpdParams::tail_prob
    pub fn tail_quantile(&self, g: f64) -> Result<f64> {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "exceedance probability must lie in (0, 1], got {g}"
            )));
        }
        Ok(self.mu + self.sigma * canonical_quantile(self.xi, g))
    }

    /// Draws `count` values by inversion: `x = Q(1 - U)` with `U` uniform
    /// on `[0, 1)`, so the argument `1 - U` stays inside `(0, 1]` and the
    /// quantile is always defined. Consumes exactly one `f64` from `rng`
    /// per value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        (0..count)
            .map(|_| {
                let g = 1.0 - rng.random::<f64>();
                self.mu + self.sigma * canonical_quantile(self.xi, g)
            })
            .collect()
    }
}

/// Quantile of the canonical tail (`mu = 0`, `sigma = 1`) at exceedance
/// probability `g in (0, 1]`:
///
/// ```text
/// q = (g^(-xi) - 1) / xi = expm1(-xi ln g) / xi
/// ```
///
/// with the second-order series `L + xi L^2/2 + xi^2 L^3/6`, `L = -ln g`,
/// taking over below [`XI_SERIES_THRESHOLD`].
pub(crate) fn canonical_quantile(xi: f64, g: f64) -> f64 {
    let l = -g.ln();
    if xi.abs() < XI_SERIES_THRESHOLD {
        let xl = xi * l;
        l * (1.0 + xl / 2.0 + xl * xl / 6.0)
    } else {
        f64::exp_m1(xi * l) / xi
    }
}

//! Scalar minimization and root finding used by the fit and the level-map
//! inversion. All routines are derivative-free except the sign bisection,
//! which the caller feeds with an analytic derivative.

/// Inverse golden ratio, `(sqrt(5) - 1) / 2`.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a unimodal `f` on `[a, b]`.
///
/// Shrinks the bracket until its width drops below `tol` and returns the
/// midpoint together with the objective value there.
pub fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    debug_assert!(a < b && tol > 0.0);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}

/// Bisection for the root of `f` on `[lo, hi]` given `f(lo) < 0 < f(hi)`.
///
/// Runs until the bracket is narrower than `tol` and returns the midpoint.
pub fn bisect_sign_change(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    debug_assert!(lo < hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // interval no longer representable
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bisection for `f(x) = target` on `[lo, hi]` for increasing `f`, assuming
/// `f(lo) <= target <= f(hi)`. Stops once `|f(x) - target| <= value_tol`
/// and returns the argument, or `None` if the tolerance is never met before
/// the bracket collapses to machine resolution.
pub fn bisect_to_value(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    target: f64,
    value_tol: f64,
) -> Option<f64> {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v - target).abs() <= value_tol {
            return Some(mid);
        }
        if mid <= lo || mid >= hi {
            return None;
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}

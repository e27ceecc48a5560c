//! Shared numerical routines: adaptive quadrature, bracketed root
//! finding, golden-section minimization, finite differences, and a
//! fixed-order parallel reduction helper.

use rayon::prelude::*;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Gauss-Kronrod 15(7) adaptive quadrature
// ---------------------------------------------------------------------------

// Kronrod-15 abscissae on [0, 1] side of the symmetric rule.
const XK: [f64; 8] = [
    0.000000000000000,
    0.207784955007898,
    0.405845151377397,
    0.586087235467691,
    0.741531185599394,
    0.864864423359769,
    0.949107912342759,
    0.991455371120813,
];
const WK: [f64; 8] = [
    0.209482141084728,
    0.204432940075298,
    0.190350578064785,
    0.169004726639267,
    0.140653259715525,
    0.104790010322250,
    0.063092092629979,
    0.022935322010529,
];
// Gauss-7 weights paired with the even-indexed Kronrod abscissae.
const WG: [f64; 4] = [
    0.417959183673469,
    0.381830050505119,
    0.279705391489277,
    0.129484966168870,
];

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Result<Panel> {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut kron = 0.0;
    let mut gauss = 0.0;
    for i in 0..8 {
        let (lo, hi) = (c - hw * XK[i], c + hw * XK[i]);
        let fs = if i == 0 {
            let v = f(c);
            if !v.is_finite() {
                return Err(Error::QuadratureFailed(format!("integrand not finite at {c}")));
            }
            v
        } else {
            let (vl, vh) = (f(lo), f(hi));
            if !(vl.is_finite() && vh.is_finite()) {
                return Err(Error::QuadratureFailed(format!(
                    "integrand not finite on [{a}, {b}]"
                )));
            }
            vl + vh
        };
        kron += WK[i] * fs;
        if i % 2 == 0 {
            gauss += WG[i / 2] * fs;
        }
    }
    kron *= hw;
    gauss *= hw;
    let err = (kron - gauss).abs();
    Ok(Panel { a, b, value: kron, err })
}

/// Integrate `f` over the union of intervals delimited by `edges`
/// (ascending), adaptively splitting the worst panel until the summed
/// error estimate drops below the tolerance. The tolerance is absolute
/// for integrals of magnitude up to one and relative beyond, so log
/// transforms of large integrals keep `abs_tol` absolute accuracy.
pub fn integrate_panels(f: &dyn Fn(f64) -> f64, edges: &[f64], abs_tol: f64) -> Result<f64> {
    const MAX_PANELS: usize = 20_000;
    if edges.len() < 2 {
        return Err(Error::QuadratureFailed("need at least one interval".into()));
    }
    let mut panels: Vec<Panel> = Vec::with_capacity(edges.len() + 64);
    for w in edges.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::QuadratureFailed("panel edges must be ascending".into()));
        }
        panels.push(gk15(f, w[0], w[1])?);
    }
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let err: f64 = panels.iter().map(|p| p.err).sum();
        if !total.is_finite() || total.abs() > 1e290 {
            return Err(Error::QuadratureFailed("integral overflows".into()));
        }
        if err <= abs_tol * total.abs().max(1.0) {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::QuadratureFailed(format!(
                "tolerance {abs_tol:.1e} unreachable with {MAX_PANELS} panels (err {err:.1e})"
            )));
        }
        // Split the panel with the largest error estimate.
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .expect("nonempty");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if mid <= p.a || mid >= p.b {
            return Err(Error::QuadratureFailed(
                "panel too narrow to split further".into(),
            ));
        }
        panels.push(gk15(f, p.a, mid)?);
        panels.push(gk15(f, mid, p.b)?);
    }
}

// ---------------------------------------------------------------------------
// Scalar solvers
// ---------------------------------------------------------------------------

/// Bisection for `f(x) = 0` on `[lo, hi]` with `f(lo) < 0 < f(hi)` (or the
/// reverse). Converges to `x_tol` in the argument.
pub fn bisect(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, x_tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::RootNotFound(format!(
            "no sign change on [{lo}, {hi}] (f = {flo:.3e}, {fhi:.3e})"
        )));
    }
    let neg_at_lo = flo < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= x_tol {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == neg_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`.
pub fn golden_min(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, x_tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618033988749894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > x_tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Central second difference `(f(x+h) - 2 f(x) + f(x-h)) / h^2`.
pub fn second_difference(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

// ---------------------------------------------------------------------------
// Reproducible parallel reduction
// ---------------------------------------------------------------------------

/// Evaluate `eval` over `[0, n)` in fixed blocks, in parallel, returning
/// the per-block results in block order. Summing the returned vector
/// sequentially yields the same floating-point result regardless of
/// worker count, because each block is evaluated sequentially and blocks
/// are combined in index order.
pub fn blocked<A: Send>(
    n: u64,
    block_size: u64,
    eval: impl Fn(std::ops::Range<u64>) -> A + Sync,
) -> Vec<A> {
    assert!(block_size > 0);
    let n_blocks = n.div_ceil(block_size);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * block_size;
            let hi = n.min(lo + block_size);
            eval(lo..hi)
        })
        .collect()
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_gaussian_density_to_one() {
        let f = |y: f64| (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let edges = [-10.0, -2.0, 0.0, 2.0, 10.0];
        let v = integrate_panels(&f, &edges, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "v = {v}");
    }

    #[test]
    fn quadrature_handles_kinks() {
        // integral of |y| over [-1, 2] = 0.5 + 2 = 2.5
        let f = |y: f64| y.abs();
        let v = integrate_panels(&f, &[-1.0, 2.0], 1e-12).unwrap();
        assert!((v - 2.5).abs() < 1e-11, "v = {v}");
    }

    #[test]
    fn bisect_finds_quadratic_root() {
        let f = |x: f64| x * x - 2.0;
        let r = bisect(&f, 0.0, 2.0, 1e-12).unwrap();
        assert!((r - 2.0f64.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        // Comparison-based search resolves a smooth minimum only to
        // about sqrt(machine epsilon) in the argument.
        let f = |x: f64| (x - 0.7) * (x - 0.7) + 3.0;
        let m = golden_min(&f, -5.0, 5.0, 1e-10);
        assert!((m - 0.7).abs() < 1e-7, "m = {m}");
    }

    #[test]
    fn second_difference_is_exact_on_quadratics() {
        let f = |x: f64| 3.0 * x * x + x - 1.0;
        let d = second_difference(&f, 1.3, 1e-3);
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn blocked_reduction_is_order_stable() {
        let sums = blocked(1000, 128, |r| r.map(|i| (i as f64).sqrt()).sum::<f64>());
        assert_eq!(sums.len(), 8);
        let total: f64 = sums.iter().sum();
        let serial: f64 = {
            let parts = blocked(1000, 128, |r| r.map(|i| (i as f64).sqrt()).sum::<f64>());
            parts.iter().sum()
        };
        assert_eq!(total.to_bits(), serial.to_bits());
    }
}

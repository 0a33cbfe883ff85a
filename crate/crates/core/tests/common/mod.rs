//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use emloc::impedance::ETA0;
use num_complex::Complex64;

pub const LAMBDA: f64 = 299_792_458.0 / 28e9;

pub fn simpson<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Complex64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (fa + fm * 4.0 + fb) * ((b - a) / 6.0);
    refine(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> Complex64>(
    f: &F,
    a: f64,
    b: f64,
    fa: Complex64,
    fm: Complex64,
    fb: Complex64,
    whole: Complex64,
    tol: f64,
    depth: u32,
) -> Complex64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (fa + flm * 4.0 + fm) * ((m - a) / 6.0);
    let right = (fm + frm * 4.0 + fb) * ((b - m) / 6.0);
    let delta = left + right - whole;
    if depth == 0 || delta.norm() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Induced-EMF mutual impedance between parallel dipoles with sinusoidal
/// currents. Dipole 1 is centred at the origin, dipole 2 at radial distance
/// `rho` and axial offset `z0`; both are referred to their feed currents.
pub fn oracle(h1: f64, h2: f64, rho: f64, z0: f64) -> Complex64 {
    let k = 2.0 * PI / LAMBDA;
    let j = Complex64::new(0.0, 1.0);
    let g = |r: f64| (-j * (k * r)).exp() / r;
    let field = |z: f64| {
        let r1 = (rho * rho + (z - h1) * (z - h1)).sqrt();
        let r2 = (rho * rho + (z + h1) * (z + h1)).sqrt();
        let r0 = (rho * rho + z * z).sqrt();
        g(r1) + g(r2) - g(r0) * (2.0 * (k * h1).cos())
    };
    let integrand = |z: f64| field(z) * (k * (h2 - (z - z0).abs())).sin();
    let mut breaks = vec![z0 - h2, z0, z0 + h2];
    for b in [-h1, 0.0, h1] {
        if b > z0 - h2 && b < z0 + h2 {
            breaks.push(b);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut total = Complex64::new(0.0, 0.0);
    for w in breaks.windows(2) {
        // Geometric sub-panels towards each end resolve the near-singular
        // peaks of width ~rho at the source end points.
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        for (from, to) in [(a, mid), (b, mid)] {
            let mut edges = vec![0.0];
            let mut s = rho.min((to - from).abs()) * 1e-3;
            while s < (to - from).abs() {
                edges.push(s);
                s *= 2.0;
            }
            edges.push((to - from).abs());
            let sign = (to - from).signum();
            for e in edges.windows(2) {
                let (lo, hi) = (from + sign * e[0], from + sign * e[1]);
                let part = simpson(&integrand, lo.min(hi), lo.max(hi), 1e-14 / LAMBDA, 40);
                total += part;
            }
        }
    }
    total * (j * ETA0 / (4.0 * PI * (k * h1).sin() * (k * h2).sin()))
}

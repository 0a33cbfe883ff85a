//! Mutual impedance between thin, y-aligned dipoles with sinusoidal current
//! distributions.
//!
//! For a receiving dipole `q` and a radiating dipole `p` with lateral offset
//! `rho` and vertical offset `y_qp = y_q - y_p`,
//!
//! ```text
//! Z_qp = η c / (8π) · [ S(+h_p) + S(−h_p) − 2 cos(k h_p) S(0) ]
//! S(ξ) = Σ_{s0=±1} s0 exp(j s0 k h_q) I(ξ; s0)
//! ```
//!
//! where `I(ξ; s0)` has a closed form in terms of the exponential integral
//! `E1`. When the dipoles are collinear (`rho = 0`) the closed form breaks
//! down and the `s0` sum is folded into a single integrand
//! `2j sin(k(h_q − |y|)) e^{−jkR} / R` that is integrated numerically; the
//! folded form stays finite for dipoles touching end to end.
//!
//! `c = 1 / (sin(k h_q) sin(k h_p))` so that `Z_qp = Z_pq` for unequal
//! lengths; for half-wave dipoles `sin(k h) = 1`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{Dipole, ElementLayout};
use crate::linalg::{CMat, J};
use crate::quad;

/// Intrinsic impedance of free space, ohms.
pub const ETA0: f64 = 376.730_313_668;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Lateral offsets below `COLLINEAR_TOL · λ` are treated as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

/// Exponential integral `E1(c) = ∫_c^∞ e^{-u}/u du` on the principal branch.
///
/// Power series for `|c| < 4` (and for moderately large arguments in the left
/// half-plane where the continued fraction degrades), Lentz continued
/// fraction otherwise.
pub fn exp_integral_e1(c: Complex64) -> Result<Complex64> {
    if c.re == 0.0 && c.im == 0.0 {
        return Err(Error::Domain(
            "E1 has a logarithmic singularity at 0".into(),
        ));
    }
    if !(c.re.is_finite() && c.im.is_finite()) {
        if c.re == f64::INFINITY && c.im.is_finite() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        return Err(Error::Domain(format!("E1 of non-finite argument {c}")));
    }
    let r = c.norm();
    if r < 4.0 || (c.re < 0.0 && r < 40.0) {
        Ok(e1_series(c))
    } else {
        Ok(e1_continued_fraction(c))
    }
}

fn e1_series(z: Complex64) -> Complex64 {
    // E1(z) = −γ − ln z − Σ_{n≥1} (−z)^n / (n · n!)
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = Complex64::new(0.0, 0.0);
    for n in 1..500 {
        let nf = n as f64;
        term *= -z / nf;
        let add = term / nf;
        sum += add;
        if add.norm() <= 1e-17 * sum.norm() {
            break;
        }
    }
    -EULER_GAMMA - z.ln() - sum
}

fn e1_continued_fraction(z: Complex64) -> Complex64 {
    const TINY: f64 = 1e-300;
    let one = Complex64::new(1.0, 0.0);
    let mut b = z + one;
    let mut c = Complex64::new(1.0 / TINY, 0.0);
    let mut d = one / b;
    let mut h = d;
    for i in 1..100_000 {
        let an = -((i * i) as f64);
        b += 2.0;
        d = one / (d * an + b);
        c = b + c.inv() * an;
        let del = c * d;
        h *= del;
        if (del - one).norm() < 1e-16 {
            break;
        }
    }
    h * (-z).exp()
}

fn wavenumber(wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0 && wavelength.is_finite()) {
        return Err(Error::invalid("wavelength must be positive"));
    }
    Ok(2.0 * PI / wavelength)
}

/// `sqrt(d0² + x²) + s·x` without cancellation.
fn shifted_distance(d0: f64, x: f64, s: f64) -> f64 {
    let r = d0.hypot(x);
    if s * x >= 0.0 {
        r + s * x
    } else {
        d0 * d0 / (r + x.abs())
    }
}

/// `∫_L^U e^{−jkR} e^{−j s k y} / R dy` with `R = sqrt(d0² + (y − y0)²)`, in closed form.
fn j_term(k: f64, s: f64, d0: f64, y0: f64, lower: f64, upper: f64) -> Result<Complex64> {
    let l0 = shifted_distance(d0, lower - y0, s);
    let u0 = shifted_distance(d0, upper - y0, s);
    let phase = (-J * (k * s * y0)).exp();
    let e1l = exp_integral_e1(J * (k * l0))?;
    let e1u = exp_integral_e1(J * (k * u0))?;
    Ok(phase * (e1l - e1u) * s)
}

/// `S(ξ) = Σ_{s0} s0 e^{j s0 k h_q} I(ξ; s0)` through the `E1` closed form.
fn s_closed_form(k: f64, hq: f64, rho: f64, y0: f64) -> Result<Complex64> {
    let mut acc = Complex64::new(0.0, 0.0);
    for s0 in [-1.0, 1.0] {
        let i_term = j_term(k, -s0, rho, y0, -hq, 0.0)? + j_term(k, s0, rho, y0, 0.0, hq)?;
        acc += (J * (s0 * k * hq)).exp() * i_term * s0;
    }
    Ok(acc)
}

/// `S(ξ)` for collinear dipoles, folded into one integrand.
fn s_collinear(k: f64, hq: f64, y0: f64) -> Complex64 {
    // touching dipoles put the singular point on an end of `q`, up to rounding
    let y0 = if (y0 + hq).abs() < 1e-9 * hq {
        -hq
    } else if (y0 - hq).abs() < 1e-9 * hq {
        hq
    } else {
        y0
    };
    let f = |y: f64| {
        let r = (y - y0).abs();
        if r == 0.0 {
            // removable: the current vanishes at the dipole end
            return Complex64::new(k, 0.0);
        }
        (-J * (k * r)).exp() * ((k * (hq - y.abs())).sin() / r)
    };
    let tol_abs = 1e-12;
    let tol_rel = 1e-12;
    let mut cuts = vec![-hq, 0.0, hq];
    if y0 > -hq && y0 < hq && y0 != 0.0 {
        cuts.push(y0);
    }
    cuts.sort_by(f64::total_cmp);
    let integral: Complex64 = cuts
        .windows(2)
        .map(|w| quad::integrate(f, w[0], w[1], tol_abs, tol_rel))
        .sum();
    integral * J * 2.0
}

fn coupling(k: f64, hq: f64, hp: f64, rho: f64, y_qp: f64, wavelength: f64) -> Result<Complex64> {
    let sq = (k * hq).sin();
    let sp = (k * hp).sin();
    if sq.abs() < 1e-12 || sp.abs() < 1e-12 {
        return Err(Error::UnsupportedGeometry(
            "dipole length is a multiple of the wavelength (sin(kh) = 0)".into(),
        ));
    }
    let c = 1.0 / (sq * sp);
    let cos_p = (k * hp).cos();
    let collinear = rho < COLLINEAR_TOL * wavelength;
    if collinear && y_qp.abs() < (hq + hp) * (1.0 - 1e-12) {
        return Err(Error::UnsupportedGeometry(format!(
            "collinear dipoles overlap (axial separation {y_qp:.6e} m, half-lengths {hq:.6e} m and {hp:.6e} m)"
        )));
    }
    let s = |xi: f64| -> Result<Complex64> {
        let y0 = xi - y_qp;
        if collinear {
            Ok(s_collinear(k, hq, y0))
        } else {
            s_closed_form(k, hq, rho, y0)
        }
    };
    let bracket = s(hp)? + s(-hp)? - s(0.0)? * (2.0 * cos_p);
    Ok(bracket * (ETA0 * c / (8.0 * PI)))
}

/// Mutual impedance between two distinct y-aligned dipoles, ohms.
pub fn mutual_impedance(q: &Dipole, p: &Dipole, wavelength: f64) -> Result<Complex64> {
    let k = wavenumber(wavelength)?;
    let d = q.position - p.position;
    let rho = d.x.hypot(d.z);
    coupling(k, q.half_length, p.half_length, rho, d.y, wavelength)
}

/// Self impedance of a dipole (lateral offset replaced by the wire radius), ohms.
pub fn self_impedance(d: &Dipole, wavelength: f64) -> Result<Complex64> {
    let k = wavenumber(wavelength)?;
    coupling(k, d.half_length, d.half_length, d.radius, 0.0, wavelength)
}

/// `Z[i][j] = Z(rows[i], cols[j])`. When both arguments are the same layout
/// object the diagonal uses the self impedance and only the upper triangle is
/// evaluated.
pub fn impedance_matrix(
    rows: &ElementLayout,
    cols: &ElementLayout,
    wavelength: f64,
) -> Result<CMat> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::invalid("impedance matrix of an empty layout"));
    }
    if std::ptr::eq(rows, cols) {
        return coupling_matrix(rows, wavelength);
    }
    let mut z = CMat::zeros(rows.len(), cols.len());
    for (i, q) in rows.elements.iter().enumerate() {
        for (j, p) in cols.elements.iter().enumerate() {
            z[(i, j)] = mutual_impedance(q, p, wavelength)?;
        }
    }
    Ok(z)
}

/// Square impedance matrix of a layout with itself (self impedance on the diagonal).
pub fn coupling_matrix(layout: &ElementLayout, wavelength: f64) -> Result<CMat> {
    if layout.is_empty() {
        return Err(Error::invalid("impedance matrix of an empty layout"));
    }
    let n = layout.len();
    let mut z = CMat::zeros(n, n);
    for i in 0..n {
        let q = &layout.elements[i];
        z[(i, i)] = self_impedance(q, wavelength)?;
        for j in i + 1..n {
            let v = mutual_impedance(q, &layout.elements[j], wavelength)?;
            z[(i, j)] = v;
            z[(j, i)] = v;
        }
    }
    Ok(z)
}

//! Dense complex linear algebra helpers shared by the channel and estimation code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Condition number above which an inverse is reported as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub(crate) const J: Complex64 = Complex64::new(0.0, 1.0);

/// Induced 1-norm (max column absolute sum).
pub fn norm1(a: &CMat) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse through a pivoted LU factorization, rejecting matrices whose
/// 1-norm condition number exceeds [`SINGULAR_CONDITION`].
pub fn inverse_checked(a: &CMat, name: &str) -> Result<CMat> {
    if !a.is_square() {
        return Err(Error::invalid(format!("`{name}` is not square")));
    }
    let inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::singular(name, f64::INFINITY))?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > SINGULAR_CONDITION {
        return Err(Error::singular(name, cond));
    }
    Ok(inv)
}

/// `a⁻¹ b` with the same conditioning guard as [`inverse_checked`].
pub fn solve_checked(a: &CMat, b: &CMat, name: &str) -> Result<CMat> {
    Ok(inverse_checked(a, name)? * b)
}

/// Cholesky factor of a Hermitian positive definite matrix.
pub struct HermitianPd {
    chol: Cholesky<Complex64, Dyn>,
}

impl HermitianPd {
    pub fn new(a: &CMat, name: &str) -> Result<Self> {
        let chol = Cholesky::new(a.clone()).ok_or_else(|| Error::singular(name, f64::INFINITY))?;
        Ok(Self { chol })
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &CMat) -> CMat {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &CVec) -> CVec {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> CMat {
        self.chol.inverse()
    }
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted ascending
/// and eigenvectors reordered to match.
pub fn hermitian_eigen(a: &CMat) -> Result<(Vec<f64>, CMat)> {
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric(
            "eigendecomposition of a non-finite matrix".into(),
        ));
    }
    let sym = hermitize(a);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(a.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    Ok((values, vectors))
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut v: Vec<f64> = hermitize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// `(a + a*) / 2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

pub fn diag_real(values: &[f64]) -> CMat {
    CMat::from_diagonal(&CVec::from_iterator(
        values.len(),
        values.iter().map(|&v| Complex64::new(v, 0.0)),
    ))
}

pub fn diag_complex(values: &[Complex64]) -> CMat {
    CMat::from_diagonal(&CVec::from_column_slice(values))
}

/// Relative Frobenius distance `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_diff(a: &CMat, b: &CMat) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

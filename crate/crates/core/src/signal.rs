//! Snapshot generation and covariance construction.

use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, HermitianPd};

/// Seeded generator used for every Monte Carlo draw. Trials derive their own
/// stream from a base seed with [`trial_rng`].
pub type SimRng = ChaCha12Rng;

/// Independent stream `trial` of the generator seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Per-source transmit powers and the noise power, in dBm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub source_dbm: Vec<f64>,
    pub noise_dbm: f64,
}

impl PowerSpec {
    pub fn source_watts(&self) -> Vec<f64> {
        self.source_dbm.iter().map(|&p| dbm_to_watts(p)).collect()
    }

    pub fn noise_watts(&self) -> f64 {
        dbm_to_watts(self.noise_dbm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolAlphabet {
    /// Unit-modulus QPSK.
    #[default]
    Qpsk,
    /// Circular complex Gaussian, unit power.
    Gaussian,
}

/// Draws a `CN(0, variance)` sample.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub fn qpsk<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let bits: u8 = rng.random_range(0..4);
    Complex64::new(
        if bits & 1 == 0 { h } else { -h },
        if bits & 2 == 0 { h } else { -h },
    )
}

/// `M × T` unit-power symbol matrix.
pub fn symbols<R: Rng + ?Sized>(m: usize, t: usize, alphabet: SymbolAlphabet, rng: &mut R) -> CMat {
    CMat::from_fn(m, t, |_, _| match alphabet {
        SymbolAlphabet::Qpsk => qpsk(rng),
        SymbolAlphabet::Gaussian => complex_gaussian(rng, 1.0),
    })
}

/// `N × T` matrix of i.i.d. `CN(0, variance)` entries.
pub fn awgn<R: Rng + ?Sized>(n: usize, t: usize, variance: f64, rng: &mut R) -> CMat {
    CMat::from_fn(n, t, |_, _| complex_gaussian(rng, variance))
}

/// `X = H √G S + U` with `G = diag(powers)` in watts.
pub fn generate_received<R: Rng + ?Sized>(
    h: &CMat,
    powers: &[f64],
    sigma2: f64,
    t: usize,
    alphabet: SymbolAlphabet,
    rng: &mut R,
) -> Result<CMat> {
    if t == 0 {
        return Err(Error::invalid("need at least one snapshot"));
    }
    if powers.len() != h.ncols() {
        return Err(Error::invalid(format!(
            "{} powers for {} channel columns",
            powers.len(),
            h.ncols()
        )));
    }
    if powers.iter().any(|&g| g < 0.0 || !g.is_finite()) || !(sigma2 >= 0.0) {
        return Err(Error::invalid("powers must be finite and non-negative"));
    }
    let mut s = symbols(h.ncols(), t, alphabet, rng);
    for (m, mut row) in s.row_iter_mut().enumerate() {
        row *= Complex64::new(powers[m].sqrt(), 0.0);
    }
    let u = awgn(h.nrows(), t, sigma2, rng);
    Ok(h * s + u)
}

/// `R = H G H* + σ² I`.
pub fn model_covariance(h: &CMat, powers: &[f64], sigma2: f64) -> Result<CMat> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("noise power must be positive"));
    }
    if powers.len() != h.ncols() {
        return Err(Error::invalid("power count does not match channel columns"));
    }
    let n = h.nrows();
    let mut r = CMat::identity(n, n) * Complex64::new(sigma2, 0.0);
    for (m, col) in h.column_iter().enumerate() {
        let c: CVec = col.into_owned();
        r += (&c * c.adjoint()) * Complex64::new(powers[m], 0.0);
    }
    Ok(r)
}

/// `R = K K* + σ² I` kept in factored form. With `K = H √G` this is the model
/// covariance; inverse, log-determinant and quadratic forms go through the
/// `M × M` core `I + K*K/σ²`.
pub struct LowRankCovariance {
    k: CMat,
    sigma2: f64,
    core: Option<HermitianPd>,
}

impl LowRankCovariance {
    pub fn new(h: &CMat, powers: &[f64], sigma2: f64) -> Result<Self> {
        if powers.len() != h.ncols() {
            return Err(Error::invalid("power count does not match channel columns"));
        }
        if powers.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(Error::invalid("powers must be finite and non-negative"));
        }
        let mut k = h.clone();
        for (m, mut col) in k.column_iter_mut().enumerate() {
            col *= Complex64::new(powers[m].sqrt(), 0.0);
        }
        Self::from_factor(k, sigma2)
    }

    pub fn from_factor(k: CMat, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid("noise power must be positive"));
        }
        if k.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Numeric("non-finite covariance factor".into()));
        }
        let core = if k.ncols() == 0 {
            None
        } else {
            let m = k.ncols();
            let c = CMat::identity(m, m) + k.adjoint() * &k / Complex64::new(sigma2, 0.0);
            Some(HermitianPd::new(&c, "I + K*K/σ²")?)
        };
        Ok(Self { k, sigma2, core })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn factor(&self) -> &CMat {
        &self.k
    }

    pub fn dense(&self) -> CMat {
        let n = self.dim();
        &self.k * self.k.adjoint() + CMat::identity(n, n) * Complex64::new(self.sigma2, 0.0)
    }

    pub fn log_det(&self) -> f64 {
        let base = self.dim() as f64 * self.sigma2.ln();
        base + self.core.as_ref().map_or(0.0, |c| c.log_det())
    }

    /// `R⁻¹ B`.
    pub fn solve(&self, b: &CMat) -> CMat {
        let s = Complex64::new(self.sigma2, 0.0);
        match &self.core {
            None => b / s,
            Some(c) => {
                let kb = self.k.adjoint() * b;
                (b - &self.k * c.solve(&kb) / s) / s
            }
        }
    }

    /// `X* R⁻¹ X`.
    pub fn quad_form(&self, x: &CMat) -> CMat {
        let s = Complex64::new(self.sigma2, 0.0);
        let xx = x.adjoint() * x;
        match &self.core {
            None => xx / s,
            Some(c) => {
                let kx = self.k.adjoint() * x;
                (xx - kx.adjoint() * c.solve(&kx) / s) / s
            }
        }
    }

    /// `tr(R⁻¹ S)` for Hermitian `S`.
    pub fn trace_solve(&self, s_mat: &CMat) -> f64 {
        let s = self.sigma2;
        let tr: f64 = (0..s_mat.nrows()).map(|i| s_mat[(i, i)].re).sum();
        match &self.core {
            None => tr / s,
            Some(c) => {
                let ks = self.k.adjoint() * s_mat * &self.k;
                let inner = c.solve(&ks);
                let tr_inner: f64 = (0..inner.nrows()).map(|i| inner[(i, i)].re).sum();
                (tr - tr_inner / s) / s
            }
        }
    }
}

/// `R̂ = X X* / T`.
pub fn sample_covariance(x: &CMat) -> CMat {
    let t = x.ncols().max(1) as f64;
    (x * x.adjoint()) / Complex64::new(t, 0.0)
}

/// Writes a snapshot matrix as CSV rows `element,snapshot,re,im`.
pub fn write_snapshots_csv<W: Write>(x: &CMat, mut w: W) -> std::io::Result<()> {
    writeln!(w, "element,snapshot,re,im")?;
    for t in 0..x.ncols() {
        for n in 0..x.nrows() {
            let v = x[(n, t)];
            writeln!(w, "{n},{t},{:e},{:e}", v.re, v.im)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hermitian_eigenvalues, rel_diff, HermitianPd};

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-18);
        assert!((watts_to_dbm(dbm_to_watts(-87.0)) + 87.0).abs() < 1e-12);
    }

    #[test]
    fn qpsk_unit_modulus() {
        let mut rng = trial_rng(1, 0);
        let s = symbols(3, 500, SymbolAlphabet::Qpsk, &mut rng);
        assert!(s.iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn noise_only_when_power_zero() {
        let mut rng = trial_rng(2, 0);
        let h = CMat::from_element(10, 1, Complex64::new(1.0, 1.0));
        let x = generate_received(&h, &[0.0], 0.5, 10_000, SymbolAlphabet::Qpsk, &mut rng).unwrap();
        let var = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / (x.len() as f64);
        assert!((var - 0.5).abs() / 0.5 < 0.02, "{var}");
    }

    #[test]
    fn noise_variance_over_many_samples() {
        let mut rng = trial_rng(3, 0);
        let u = awgn(100, 1000, 2.0, &mut rng);
        let var = u.iter().map(|z| z.norm_sqr()).sum::<f64>() / (u.len() as f64);
        assert!((var - 2.0).abs() / 2.0 < 0.02, "{var}");
    }

    #[test]
    fn signal_column_modulus() {
        let mut rng = trial_rng(4, 0);
        let h = CMat::from_element(1, 1, Complex64::new(1.0, 0.0));
        let x = generate_received(&h, &[4.0], 0.0, 10, SymbolAlphabet::Qpsk, &mut rng).unwrap();
        assert!(x.iter().all(|z| (z.norm() - 2.0).abs() < 1e-14));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let h = CMat::from_element(4, 1, Complex64::new(0.3, -0.1));
        let a = generate_received(
            &h,
            &[1.0],
            0.1,
            10,
            SymbolAlphabet::Qpsk,
            &mut trial_rng(7, 3),
        )
        .unwrap();
        let b = generate_received(
            &h,
            &[1.0],
            0.1,
            10,
            SymbolAlphabet::Qpsk,
            &mut trial_rng(7, 3),
        )
        .unwrap();
        let c = generate_received(
            &h,
            &[1.0],
            0.1,
            10,
            SymbolAlphabet::Qpsk,
            &mut trial_rng(7, 4),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn model_covariance_properties() {
        assert!(model_covariance(&CMat::zeros(3, 1), &[1.0], 0.0).is_err());
        let r0 = model_covariance(&CMat::zeros(3, 1), &[1.0], 0.7).unwrap();
        assert!(rel_diff(&r0, &(CMat::identity(3, 3) * Complex64::new(0.7, 0.0))) < 1e-15);

        let h = CMat::from_fn(5, 1, |i, _| Complex64::new(i as f64, 1.0 - i as f64));
        let g = 2.5;
        let r = model_covariance(&h, &[g], 0.1).unwrap();
        let eig = hermitian_eigenvalues(&r);
        let expected = g * h.norm_squared() + 0.1;
        assert!((eig[4] - expected).abs() / expected < 1e-12);
        assert!(eig.iter().all(|&l| l >= 0.1 - 1e-9 * 0.1));
        assert!(HermitianPd::new(&r, "R").is_ok());
        let tr: f64 = (0..5).map(|i| r[(i, i)].re).sum();
        assert!((tr - (g * h.norm_squared() + 5.0 * 0.1)).abs() < 1e-12);
        assert!(rel_diff(&r, &r.adjoint()) < 1e-15);
    }

    #[test]
    fn low_rank_matches_dense() {
        let mut rng = trial_rng(6, 0);
        let h = awgn(9, 2, 1.0, &mut rng);
        let powers = [3.0, 0.5];
        let sigma2 = 0.2;
        let lr = LowRankCovariance::new(&h, &powers, sigma2).unwrap();
        let dense = model_covariance(&h, &powers, sigma2).unwrap();
        assert!(rel_diff(&lr.dense(), &dense) < 1e-14);
        let chol = HermitianPd::new(&dense, "R").unwrap();
        assert!((lr.log_det() - chol.log_det()).abs() < 1e-12);
        let x = awgn(9, 4, 1.0, &mut rng);
        assert!(rel_diff(&lr.solve(&x), &chol.solve(&x)) < 1e-12);
        let q = x.adjoint() * chol.solve(&x);
        assert!(rel_diff(&lr.quad_form(&x), &q) < 1e-12);
        let s = sample_covariance(&x);
        let tr = (chol.solve(&s)).trace().re;
        assert!((lr.trace_solve(&s) - tr).abs() < 1e-12 * tr.abs());
        let empty = LowRankCovariance::new(&CMat::zeros(9, 0), &[], sigma2).unwrap();
        assert!((empty.log_det() - 9.0 * sigma2.ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_covariance_rank() {
        let mut rng = trial_rng(5, 0);
        let x = awgn(8, 1, 1.0, &mut rng);
        let r = sample_covariance(&x);
        let xx = &x * x.adjoint();
        assert!(rel_diff(&r, &xx) < 1e-15);
        let x3 = awgn(8, 3, 1.0, &mut rng);
        let eig = hermitian_eigenvalues(&sample_covariance(&x3));
        let big = eig.iter().filter(|&&l| l > 1e-10 * eig[7]).count();
        assert_eq!(big, 3);
    }
}

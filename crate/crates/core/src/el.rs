//! Expected-likelihood statistics: the likelihood ratio of a covariance model
//! for an undersampled data matrix, its model-independent reference
//! distribution, thresholds and estimate classification.
//!
//! All ratios are in the per-snapshot form
//!
//! ```text
//! LR(X | R) = det(B) e^T / e^{tr B},   B = X* R⁻¹ X / N
//! ```
//!
//! which lies in `(0, 1]` and equals one only when `B = I`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::linalg::{CMat, HermitianPd};
use crate::locate::{estimate_powers, ml_refine, MlOptions};
use crate::signal::{
    awgn, generate_received, sample_covariance, trial_rng, LowRankCovariance, SymbolAlphabet,
};

const CACHE_MAGIC: &[u8; 8] = b"LRDIST01";

/// Converts the Gram matrix `B` to the likelihood ratio. A singular `B`
/// (rank-deficient data) gives 0.
pub fn lr_from_gram(b: &CMat) -> f64 {
    let t = b.nrows() as f64;
    let tr: f64 = (0..b.nrows()).map(|i| b[(i, i)].re).sum();
    match HermitianPd::new(b, "B") {
        Ok(chol) => {
            let log_lr = chol.log_det() + t - tr;
            if log_lr.is_nan() {
                0.0
            } else {
                log_lr.exp().min(1.0)
            }
        }
        Err(_) => 0.0,
    }
}

fn check_regime(n: usize, t: usize) -> Result<()> {
    if n <= t || t == 0 {
        return Err(Error::UnsupportedRegime { n, t });
    }
    Ok(())
}

/// Likelihood ratio of the data `X` (`N × T`) under the covariance `R`.
pub fn likelihood_ratio(x: &CMat, r: &CMat) -> Result<f64> {
    let (n, t) = x.shape();
    check_regime(n, t)?;
    if r.shape() != (n, n) {
        return Err(Error::invalid(
            "covariance does not match the data dimension",
        ));
    }
    let chol = HermitianPd::new(r, "R")?;
    let b = x.adjoint() * chol.solve(x) / Complex64::new(n as f64, 0.0);
    Ok(lr_from_gram(&b))
}

/// [`likelihood_ratio`] for a covariance kept in low-rank form.
pub fn likelihood_ratio_low_rank(x: &CMat, r: &LowRankCovariance) -> Result<f64> {
    let (n, t) = x.shape();
    check_regime(n, t)?;
    if r.dim() != n {
        return Err(Error::invalid(
            "covariance does not match the data dimension",
        ));
    }
    let b = r.quad_form(x) / Complex64::new(n as f64, 0.0);
    Ok(lr_from_gram(&b))
}

/// Sorted Monte Carlo samples of `LR(E | I)` for `N × T` unit-power AWGN `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDistribution {
    samples: Vec<f64>,
    n: usize,
    t: usize,
    seed: u64,
}

impl LrDistribution {
    /// Draw `i` uses stream `i` of the generator seeded with `seed`, so the
    /// result does not depend on how draws are scheduled.
    pub fn build(n: usize, t: usize, n_draws: usize, seed: u64) -> Result<Self> {
        check_regime(n, t)?;
        if n_draws == 0 {
            return Err(Error::invalid(
                "reference distribution needs at least one draw",
            ));
        }
        let samples = (0..n_draws)
            .map(|i| {
                let mut rng = trial_rng(seed, i as u64);
                let e = awgn(n, t, 1.0, &mut rng);
                let b = e.adjoint() * &e / Complex64::new(n as f64, 0.0);
                lr_from_gram(&b)
            })
            .collect();
        Self::from_samples(n, t, samples, seed)
    }

    pub fn from_samples(n: usize, t: usize, mut samples: Vec<f64>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty sample set"));
        }
        if samples.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::invalid(
                "likelihood ratio samples must lie in [0, 1]",
            ));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self {
            samples,
            n,
            t,
            seed,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_draws(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Linear interpolation between order statistics (sample quantile type 7).
    pub fn quantile(&self, p: f64) -> f64 {
        let s = &self.samples;
        let p = p.clamp(0.0, 1.0);
        let h = (s.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        if lo + 1 >= s.len() {
            return s[s.len() - 1];
        }
        s[lo] + (h - lo as f64) * (s[lo + 1] - s[lo])
    }

    /// Fraction of samples `≤ x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.samples.partition_point(|&s| s <= x) as f64 / self.samples.len() as f64
    }

    /// Counts in `bins` equal-width bins over `[0, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<u64> {
        histogram(&self.samples, bins)
    }

    pub fn cache_file_name(n: usize, t: usize, n_draws: usize, seed: u64) -> String {
        format!("lr_n{n}_t{t}_d{n_draws}_s{seed}.bin")
    }

    /// Layout: magic `LRDIST01`, `u32` N, `u32` T, `u64` draw count, `u64`
    /// seed, then the sorted samples as `f64`; all little-endian.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.t as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| Error::invalid(format!("{}: {e}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::invalid(format!(
                "{}: not a distribution cache",
                path.display()
            )));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let t = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let n_draws = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let seed = u64::from_le_bytes(b8);
        let mut samples = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            r.read_exact(&mut b8).map_err(io)?;
            samples.push(f64::from_le_bytes(b8));
        }
        Self::from_samples(n, t, samples, seed)
    }

    /// Loads `(N, T, n_draws, seed)` from `dir` if cached, otherwise builds and stores it.
    pub fn load_or_build(
        dir: &Path,
        n: usize,
        t: usize,
        n_draws: usize,
        seed: u64,
    ) -> Result<Self> {
        let path: PathBuf = dir.join(Self::cache_file_name(n, t, n_draws, seed));
        if path.exists() {
            if let Ok(d) = Self::load(&path) {
                if d.n == n && d.t == t && d.n_draws() == n_draws && d.seed == seed {
                    return Ok(d);
                }
            }
        }
        let d = Self::build(n, t, n_draws, seed)?;
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))?;
        d.save(&path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Ok(d)
    }
}

/// Counts in `bins` equal-width bins over `[0, 1]`; out-of-range values land in the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let b = counts.len();
    for &v in values {
        let i = ((v * b as f64).floor() as isize).clamp(0, b as isize - 1) as usize;
        counts[i] += 1;
    }
    counts
}

/// `β` such that a fraction `p_beta` of true-model ratios fall below it.
pub fn lr_threshold(dist: &LrDistribution, p_beta: f64) -> Result<f64> {
    if !(p_beta > 0.0 && p_beta < 1.0) {
        return Err(Error::invalid("p_beta must lie in (0, 1)"));
    }
    Ok(dist.quantile(p_beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Reliable,
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrVerdict {
    pub classification: Classification,
    pub lr_value: f64,
    pub beta: f64,
}

/// Reliable only when the ratio strictly exceeds the threshold.
pub fn classify(lr_value: f64, beta: f64) -> LrVerdict {
    let classification = if lr_value > beta {
        Classification::Reliable
    } else {
        Classification::Outlier
    };
    LrVerdict {
        classification,
        lr_value,
        beta,
    }
}

pub fn classify_estimate(x: &CMat, r_mm: &CMat, beta: f64) -> Result<LrVerdict> {
    Ok(classify(likelihood_ratio(x, r_mm)?, beta))
}

/// Which powers enter the mismatched-model covariance for the `γ̂` metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaPower {
    /// The scenario's transmit powers.
    #[default]
    Scenario,
    /// Powers re-estimated from each realization at the known positions.
    Estimated,
}

pub struct GammaSetup<'a> {
    pub truth: &'a dyn ChannelModel,
    pub mm: &'a dyn ChannelModel,
    pub sources: &'a [Position],
    pub powers: &'a [f64],
    pub sigma2: f64,
    pub snapshots: usize,
    pub realizations: usize,
    pub power: GammaPower,
    pub alphabet: SymbolAlphabet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub mean_lr: f64,
    pub lr_values: Vec<f64>,
}

/// `γ̂ = mean_k LR(X_k | R_MM(p)) / E{LR(X | R_0)}` with `X_k` drawn from the true model.
pub fn mismatch_metric_gamma<R: Rng + ?Sized>(
    setup: &GammaSetup<'_>,
    reference_mean: f64,
    rng: &mut R,
) -> Result<GammaEstimate> {
    if setup.realizations == 0 {
        return Err(Error::invalid("need at least one realization"));
    }
    if !(reference_mean > 0.0) {
        return Err(Error::invalid("reference mean must be positive"));
    }
    if setup.truth.num_receivers() != setup.mm.num_receivers() {
        return Err(Error::invalid(
            "true and mismatched models see different arrays",
        ));
    }
    let h_true = setup.truth.channel(setup.sources)?;
    let h_mm = setup.mm.channel(setup.sources)?;
    let fixed = match setup.power {
        GammaPower::Scenario => Some(LowRankCovariance::new(&h_mm, setup.powers, setup.sigma2)?),
        GammaPower::Estimated => None,
    };
    let mut lr_values = Vec::with_capacity(setup.realizations);
    for _ in 0..setup.realizations {
        let x = generate_received(
            &h_true,
            setup.powers,
            setup.sigma2,
            setup.snapshots,
            setup.alphabet,
            rng,
        )?;
        let lr = match &fixed {
            Some(r) => likelihood_ratio_low_rank(&x, r)?,
            None => {
                let g = estimate_powers(&h_mm, &sample_covariance(&x), setup.sigma2)?;
                likelihood_ratio_low_rank(&x, &LowRankCovariance::new(&h_mm, &g, setup.sigma2)?)?
            }
        };
        lr_values.push(lr);
    }
    let mean_lr = lr_values.iter().sum::<f64>() / lr_values.len() as f64;
    Ok(GammaEstimate {
        gamma: mean_lr / reference_mean,
        mean_lr,
        lr_values,
    })
}

/// One candidate assignment of MUSIC peaks to sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// Indices into the peak list.
    pub peaks: Vec<usize>,
    pub positions: Vec<Position>,
    pub powers: Vec<f64>,
    pub lr: f64,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Scores every `M̂`-subset of the peaks by the likelihood ratio of the
/// mismatched covariance, powers re-estimated per subset. With `refine`, each
/// subset is first polished by the ML search, confined to `max_shift_m`
/// (one initial simplex step when unset) so that a subset cannot migrate
/// onto peaks it does not contain. Sorted by LR, best first.
pub fn group_candidates(
    peaks: &[Position],
    m_hat: usize,
    x: &CMat,
    mm: &dyn ChannelModel,
    sigma2: f64,
    refine: Option<&MlOptions>,
    cap: usize,
) -> Result<Vec<Grouping>> {
    if m_hat == 0 || peaks.len() < m_hat {
        return Err(Error::invalid(format!(
            "{} peaks cannot be grouped into {m_hat} sources",
            peaks.len()
        )));
    }
    let count = binomial(peaks.len(), m_hat);
    if count > cap {
        return Err(Error::TooManyGroupings {
            groupings: count,
            cap,
        });
    }
    let r_hat = sample_covariance(x);
    let mut out = Vec::with_capacity(count);
    for subset in combinations(peaks.len(), m_hat) {
        let init: Vec<Position> = subset.iter().map(|&i| peaks[i]).collect();
        let (positions, powers) = match refine {
            Some(opts) => {
                let local = MlOptions {
                    max_shift_m: opts.max_shift_m.or(Some(opts.initial_step_m)),
                    ..opts.clone()
                };
                let fit = ml_refine(&r_hat, &init, mm, sigma2, &local)?;
                (fit.positions, fit.powers)
            }
            None => {
                let h = mm.channel(&init)?;
                let g = estimate_powers(&h, &r_hat, sigma2)?;
                (init, g)
            }
        };
        let h = mm.channel(&positions)?;
        let lr = likelihood_ratio_low_rank(x, &LowRankCovariance::new(&h, &powers, sigma2)?)?;
        out.push(Grouping {
            peaks: subset,
            positions,
            powers,
            lr,
        });
    }
    out.sort_by(|a, b| b.lr.total_cmp(&a.lr));
    Ok(out)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS test needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = sign * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{model_covariance, SimRng};
    use rand::SeedableRng;

    #[test]
    fn identity_gram_gives_one() {
        assert!((lr_from_gram(&CMat::identity(5, 5)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_oversampled() {
        let x = CMat::zeros(4, 4);
        assert!(matches!(
            likelihood_ratio(&x, &CMat::identity(4, 4)),
            Err(Error::UnsupportedRegime { n: 4, t: 4 })
        ));
    }

    #[test]
    fn low_rank_agrees_with_dense() {
        let mut rng = SimRng::seed_from_u64(3);
        let h = awgn(12, 1, 1.0, &mut rng);
        let x = awgn(12, 4, 1.0, &mut rng);
        let dense = model_covariance(&h, &[2.0], 0.3).unwrap();
        let low = LowRankCovariance::new(&h, &[2.0], 0.3).unwrap();
        let a = likelihood_ratio(&x, &dense).unwrap();
        let b = likelihood_ratio_low_rank(&x, &low).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn threshold_and_quantiles() {
        let d = LrDistribution::from_samples(8, 2, vec![0.5, 0.1, 0.3, 0.2, 0.4], 0).unwrap();
        assert_eq!(d.samples(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
        assert!((lr_threshold(&d, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!((lr_threshold(&d, 1e-9).unwrap() - 0.1).abs() < 1e-8);
        assert!((d.quantile(0.125) - 0.15).abs() < 1e-15);
        assert!(lr_threshold(&d, 0.0).is_err());
        assert!(lr_threshold(&d, 1.0).is_err());
        assert!((d.mean() - 0.3).abs() < 1e-15);
        assert!((d.cdf(0.3) - 0.6).abs() < 1e-15);
        let single = LrDistribution::build(8, 2, 1, 4).unwrap();
        assert_eq!(single.n_draws(), 1);
        assert_eq!(single.quantile(0.3), single.samples()[0]);
    }

    #[test]
    fn classification_is_strict() {
        assert_eq!(
            classify(0.45, 0.32).classification,
            Classification::Reliable
        );
        assert_eq!(
            classify(0.001, 0.32).classification,
            Classification::Outlier
        );
        assert_eq!(classify(0.32, 0.32).classification, Classification::Outlier);
    }

    #[test]
    fn cache_round_trip() {
        let dir = std::env::temp_dir().join(format!("emloc-el-{}", std::process::id()));
        let d = LrDistribution::load_or_build(&dir, 16, 3, 50, 9).unwrap();
        let again = LrDistribution::load_or_build(&dir, 16, 3, 50, 9).unwrap();
        assert_eq!(d, again);
        let path = dir.join(LrDistribution::cache_file_name(16, 3, 50, 9));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CACHE_MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 8 + 8 + 50 * 8);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn combinations_enumerate_subsets() {
        assert_eq!(combinations(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(combinations(2, 2).len(), 1);
        assert_eq!(binomial(10, 3), 120);
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let same: Vec<f64> = (0..400).map(|i| (i as f64 + 0.5) / 400.0).collect();
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.2).collect();
        assert!(ks_two_sample(&a, &same).unwrap().p_value > 0.5);
        assert!(ks_two_sample(&a, &shifted).unwrap().p_value < 1e-6);
        assert!((ks_two_sample(&a, &shifted).unwrap().statistic - 0.2).abs() < 0.01);
    }
}

//! Channel-similarity maps, Fisher information and CRB with numerical
//! derivatives, element-wise RIS profile optimization and the two-stage
//! RIS-assisted localization protocol.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    mc_correction_direct, nf_channel, ChannelModel, ChannelModelKind, EmSystem, Link,
    MismatchedModel, TunableImpedance, Wavefront,
};
use crate::el::{classify, likelihood_ratio_low_rank, Classification};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::linalg::{inverse_checked, CMat, CVec, HermitianPd, J};
use crate::locate::{
    estimate_num_sources_mdl, estimate_powers, music_peaks, music_spectrum, GridManifold,
    LocalizationResult, Localizer, MlOptions, SearchGrid,
};
use crate::optim::golden_section;
use crate::signal::{generate_received, sample_covariance, LowRankCovariance, SymbolAlphabet};

/// `Q = ‖q h(p) − h(p0)‖² / ‖h(p0)‖²` with the least-squares scalar
/// `q = h*(p0) h(p) / ‖h(p)‖²`.
pub fn q_metric(h_p: &CVec, h_p0: &CVec) -> Result<f64> {
    if h_p.len() != h_p0.len() {
        return Err(Error::invalid("channel lengths differ"));
    }
    let np = h_p.dotc(h_p).re;
    let n0 = h_p0.dotc(h_p0).re;
    if np == 0.0 || n0 == 0.0 {
        return Err(Error::invalid("Q-metric of a zero channel"));
    }
    let q = h_p.dotc(h_p0) / np;
    let resid = h_p * q - h_p0;
    Ok((resid.norm_squared() / n0).clamp(0.0, 1.0))
}

pub fn q_metric_at(model: &dyn ChannelModel, p: &Position, p0: &Position) -> Result<f64> {
    let h = model.channel(std::slice::from_ref(p))?;
    let h0 = model.channel(std::slice::from_ref(p0))?;
    q_metric(&h.column(0).into_owned(), &h0.column(0).into_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QMap {
    pub grid: SearchGrid,
    pub reference: Position,
    /// Linear Q values indexed by [`SearchGrid::index`].
    pub values: Vec<f64>,
}

impl QMap {
    pub fn values_db(&self) -> Vec<f64> {
        self.values.iter().map(|&q| 10.0 * q.log10()).collect()
    }

    /// Grid points with `Q` below `threshold_db`, not counting the cell
    /// nearest to the reference and its eight neighbours.
    pub fn count_below(&self, threshold_db: f64) -> usize {
        let (cx, cz) = self.grid.nearest(&self.reference);
        let limit = 10f64.powf(threshold_db / 10.0);
        self.values
            .iter()
            .enumerate()
            .filter(|&(i, &q)| {
                let (ix, iz) = self.grid.coords(i);
                let near = ix.abs_diff(cx) <= 1 && iz.abs_diff(cz) <= 1;
                !near && q < limit
            })
            .count()
    }
}

pub fn q_metric_map(model: &dyn ChannelModel, grid: &SearchGrid, p0: &Position) -> Result<QMap> {
    let h0 = model
        .channel(std::slice::from_ref(p0))?
        .column(0)
        .into_owned();
    let values = grid
        .points()
        .iter()
        .map(|p| {
            q_metric(
                &model
                    .channel(std::slice::from_ref(p))?
                    .column(0)
                    .into_owned(),
                &h0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QMap {
        grid: grid.clone(),
        reference: *p0,
        values,
    })
}

/// Source positions and powers; the parameter vector is
/// `[x₁, z₁, g₁, …, x_M, z_M, g_M]` with heights held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateVector {
    pub positions: Vec<Position>,
    pub powers: Vec<f64>,
}

impl EstimateVector {
    pub fn new(positions: Vec<Position>, powers: Vec<f64>) -> Result<Self> {
        if positions.is_empty() || positions.len() != powers.len() {
            return Err(Error::invalid(
                "estimate needs one power per position and at least one source",
            ));
        }
        if powers.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(Error::invalid(
                "estimated powers must be finite and non-negative",
            ));
        }
        Ok(Self { positions, powers })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn params(&self) -> Vec<f64> {
        self.positions
            .iter()
            .zip(&self.powers)
            .flat_map(|(p, &g)| [p.x, p.z, g])
            .collect()
    }

    pub fn from_params(&self, params: &[f64]) -> Self {
        let positions = self
            .positions
            .iter()
            .zip(params.chunks(3))
            .map(|(p, c)| Position::new(c[0], p.y, c[1]))
            .collect();
        let powers = params.chunks(3).map(|c| c[2]).collect();
        Self { positions, powers }
    }

    /// Per-parameter finite-difference steps.
    pub fn steps(&self, deltas: &FisherDeltas) -> Vec<f64> {
        self.powers
            .iter()
            .flat_map(|&g| {
                [
                    deltas.position_m,
                    deltas.position_m,
                    (deltas.power_rel * g).max(deltas.power_floor_w),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherDeltas {
    pub position_m: f64,
    pub power_rel: f64,
    pub power_floor_w: f64,
}

impl Default for FisherDeltas {
    fn default() -> Self {
        Self {
            position_m: 1e-3,
            power_rel: 1e-3,
            power_floor_w: 1e-6,
        }
    }
}

/// `J_ij = T tr(R⁻¹ ∂_i R R⁻¹ ∂_j R)` with central differences of an
/// arbitrary covariance function.
pub fn fisher_information_dense<F>(
    cov: F,
    q: &[f64],
    steps: &[f64],
    t: usize,
) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<CMat>,
{
    if q.len() != steps.len() || q.is_empty() {
        return Err(Error::invalid("one step per parameter required"));
    }
    if steps.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("finite-difference steps must be positive"));
    }
    let r = cov(q)?;
    let r_pd = HermitianPd::new(&r, "R")
        .map_err(|_| Error::Numeric("covariance is not positive definite".into()))?;
    let mut derivs = Vec::with_capacity(q.len());
    for (i, &d) in steps.iter().enumerate() {
        let mut up = q.to_vec();
        let mut down = q.to_vec();
        up[i] += d;
        down[i] -= d;
        let dr = (cov(&up)? - cov(&down)?) / Complex64::new(2.0 * d, 0.0);
        derivs.push(r_pd.solve(&dr));
    }
    let p = q.len();
    let mut jm = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let tr = (&derivs[i] * &derivs[j]).trace().re * t as f64;
            jm[(i, j)] = tr;
            jm[(j, i)] = tr;
        }
    }
    Ok(jm)
}

/// `∂R = U diag(d) U*`.
struct DerivTerm {
    u: CMat,
    d: Vec<f64>,
}

fn fisher_from_terms(k0: CMat, terms: &[DerivTerm], sigma2: f64, t: usize) -> Result<DMatrix<f64>> {
    let r = LowRankCovariance::from_factor(k0, sigma2)
        .map_err(|e| Error::Numeric(format!("model covariance is not positive definite: {e}")))?;
    let n = r.dim();
    let widths: Vec<usize> = terms.iter().map(|x| x.u.ncols()).collect();
    let total: usize = widths.iter().sum();
    let mut u = CMat::zeros(n, total);
    let mut offsets = Vec::with_capacity(terms.len());
    let mut col = 0;
    for term in terms {
        offsets.push(col);
        u.columns_mut(col, term.u.ncols()).copy_from(&term.u);
        col += term.u.ncols();
    }
    let g = u.adjoint() * r.solve(&u);
    let p = terms.len();
    let mut jm = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            for (a, &da) in terms[i].d.iter().enumerate() {
                for (b, &db) in terms[j].d.iter().enumerate() {
                    acc += da * db * g[(offsets[i] + a, offsets[j] + b)].norm_sqr();
                }
            }
            jm[(i, j)] = acc * t as f64;
            jm[(j, i)] = acc * t as f64;
        }
    }
    Ok(jm)
}

fn scaled_columns(h: &CMat, powers: &[f64]) -> CMat {
    let mut k = h.clone();
    for (m, mut c) in k.column_iter_mut().enumerate() {
        c *= Complex64::new(powers[m].sqrt(), 0.0);
    }
    k
}

/// Fisher information of `R(q) = H(P) G H*(P) + σ² I` for any channel model,
/// in the parameter order of [`EstimateVector::params`]. Position derivatives
/// are central differences over the full channel matrix (so coupling between
/// sources is kept); `R` is linear in each power, for which the derivative
/// `h_m h_m*` is used directly.
pub fn fisher_information(
    model: &dyn ChannelModel,
    est: &EstimateVector,
    sigma2: f64,
    t: usize,
    deltas: &FisherDeltas,
) -> Result<DMatrix<f64>> {
    if !(deltas.position_m > 0.0) {
        return Err(Error::invalid("position step must be positive"));
    }
    let h = model.channel(&est.positions)?;
    let k0 = scaled_columns(&h, &est.powers);
    let d = deltas.position_m;
    let mut terms = Vec::with_capacity(3 * est.len());
    for m in 0..est.len() {
        for axis in [0usize, 2] {
            let shifted = |sign: f64| {
                let mut pos = est.positions.clone();
                pos[m][axis] += sign * d;
                model
                    .channel(&pos)
                    .map(|hh| scaled_columns(&hh, &est.powers))
            };
            let up = shifted(1.0)?;
            let down = shifted(-1.0)?;
            let mm = est.len();
            let mut u = CMat::zeros(h.nrows(), 2 * mm);
            u.columns_mut(0, mm).copy_from(&up);
            u.columns_mut(mm, mm).copy_from(&down);
            let w = 1.0 / (2.0 * d);
            let mut dv = vec![w; mm];
            dv.extend(std::iter::repeat_n(-w, mm));
            terms.push(DerivTerm { u, d: dv });
        }
        terms.push(DerivTerm {
            u: h.columns(m, 1).into_owned(),
            d: vec![1.0],
        });
    }
    fisher_from_terms(k0, &terms, sigma2, t)
}

/// `J⁻¹`, computed after diagonal equilibration so that mixed metre/watt
/// scales do not ruin the factorization.
pub fn crb_matrix(fisher: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = fisher.nrows();
    if p == 0 || !fisher.is_square() {
        return Err(Error::invalid("Fisher matrix must be square and non-empty"));
    }
    let diag: Vec<f64> = (0..p).map(|i| fisher[(i, i)]).collect();
    if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Unidentifiable(
            "a parameter carries no Fisher information".into(),
        ));
    }
    let s: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
    let normalised = DMatrix::from_fn(p, p, |i, j| {
        0.5 * (fisher[(i, j)] + fisher[(j, i)]) * s[i] * s[j]
    });
    let chol = Cholesky::new(normalised)
        .ok_or_else(|| Error::Unidentifiable("Fisher information matrix is singular".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..p).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot * min_pivot < 1e-13 {
        return Err(Error::Unidentifiable(
            "Fisher information matrix is singular".into(),
        ));
    }
    let inv = chol.inverse();
    Ok(DMatrix::from_fn(p, p, |i, j| inv[(i, j)] * s[i] * s[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisCrb {
    pub x_m: f64,
    pub z_m: f64,
    pub g_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    /// `√tr J⁻¹` over all parameters.
    pub total: f64,
    pub per_source: Vec<AxisCrb>,
}

impl CrbReport {
    pub fn from_fisher(fisher: &DMatrix<f64>) -> Result<Self> {
        let inv = crb_matrix(fisher)?;
        let total = inv.trace();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Unidentifiable("non-positive CRB trace".into()));
        }
        let per_source = (0..inv.nrows() / 3)
            .map(|m| AxisCrb {
                x_m: inv[(3 * m, 3 * m)].max(0.0).sqrt(),
                z_m: inv[(3 * m + 1, 3 * m + 1)].max(0.0).sqrt(),
                g_w: inv[(3 * m + 2, 3 * m + 2)].max(0.0).sqrt(),
            })
            .collect();
        Ok(Self {
            total: total.sqrt(),
            per_source,
        })
    }
}

pub fn crb(
    model: &dyn ChannelModel,
    est: &EstimateVector,
    sigma2: f64,
    t: usize,
    deltas: &FisherDeltas,
) -> Result<CrbReport> {
    CrbReport::from_fisher(&fisher_information(model, est, sigma2, t, deltas)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizationArea {
    Continuous { lower_ohm: f64, upper_ohm: f64 },
    FiniteAlphabet { values_ohm: Vec<f64> },
}

impl OptimizationArea {
    /// `μ·[−2, −1, 0, 1, 2]`.
    pub fn fa1(mu: f64) -> Self {
        Self::FiniteAlphabet {
            values_ohm: [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|v| v * mu).collect(),
        }
    }

    /// `μ·[−1, 1]`.
    pub fn fa2(mu: f64) -> Self {
        Self::FiniteAlphabet {
            values_ohm: vec![-mu, mu],
        }
    }

    pub fn continuous(xi: f64) -> Self {
        Self::Continuous {
            lower_ohm: -xi,
            upper_ohm: xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Continuous {
                lower_ohm,
                upper_ohm,
            } => {
                if !(lower_ohm < upper_ohm) || !lower_ohm.is_finite() || !upper_ohm.is_finite() {
                    return Err(Error::invalid("continuous area needs finite lower < upper"));
                }
            }
            Self::FiniteAlphabet { values_ohm } => {
                if values_ohm.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("alphabet values must be finite"));
                }
                let mut v = values_ohm.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                if v.len() < 2 {
                    return Err(Error::invalid(
                        "alphabet needs at least two distinct values",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, value: f64) -> bool {
        match self {
            Self::Continuous {
                lower_ohm,
                upper_ohm,
            } => (*lower_ohm..=*upper_ohm).contains(&value),
            Self::FiniteAlphabet { values_ohm } => values_ohm.contains(&value),
        }
    }

    /// Closest admissible value (first alphabet entry on ties).
    pub fn project(&self, value: f64) -> f64 {
        match self {
            Self::Continuous {
                lower_ohm,
                upper_ohm,
            } => value.clamp(*lower_ohm, *upper_ohm),
            Self::FiniteAlphabet { values_ohm } => {
                values_ohm
                    .iter()
                    .copied()
                    .fold((f64::NAN, f64::INFINITY), |(best, dist), v| {
                        let d = (v - value).abs();
                        if d < dist {
                            (v, d)
                        } else {
                            (best, dist)
                        }
                    })
                    .0
            }
        }
    }

    pub fn project_profile(&self, profile: &TunableImpedance) -> TunableImpedance {
        TunableImpedance {
            r0: profile.r0,
            reactance: profile.reactance.iter().map(|&f| self.project(f)).collect(),
        }
    }
}

/// Profile-independent pieces of the MC-corrected near-field RIS model:
/// `C(f) = L (ZRR + Ztun(f))⁻¹` with `L = −Zr (Zr + Zrr)⁻¹ ZrR`.
pub struct RisNfmcContext {
    left: CMat,
    z_ris: CMat,
    ris: crate::geometry::ElementLayout,
    wavelength: f64,
    pub sigma2: f64,
    pub snapshots: usize,
    pub deltas: FisherDeltas,
}

impl RisNfmcContext {
    pub fn new(
        system: &EmSystem,
        sigma2: f64,
        snapshots: usize,
        deltas: FisherDeltas,
    ) -> Result<Self> {
        let (z_ris, z_bs_ris) = system
            .z_ris()
            .zip(system.z_bs_ris())
            .ok_or_else(|| Error::invalid("RIS optimization needs a RIS layout"))?;
        if !(sigma2 > 0.0) || snapshots == 0 {
            return Err(Error::invalid(
                "noise power and snapshot count must be positive",
            ));
        }
        let direct = mc_correction_direct(system.receiver_load(), system.z_bs())?;
        Ok(Self {
            left: -(direct * z_bs_ris),
            z_ris: z_ris.clone(),
            ris: system.ris().expect("checked").clone(),
            wavelength: system.wavelength(),
            sigma2,
            snapshots,
            deltas,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.ris.len()
    }

    /// Incremental CRB evaluator for `est` starting from `profile`.
    pub fn evaluator(
        &self,
        est: &EstimateVector,
        profile: &TunableImpedance,
    ) -> Result<RisCrbEvaluator<'_>> {
        if profile.len() != self.ris.len() {
            return Err(Error::invalid(format!(
                "profile has {} entries, RIS has {} elements",
                profile.len(),
                self.ris.len()
            )));
        }
        let mut a = self.z_ris.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += profile.load(i);
        }
        let a_inv = inverse_checked(&a, "Z_RR + Z_tun")?;
        let c = &self.left * &a_inv;
        let d = self.deltas.position_m;
        let mut raw = Vec::with_capacity(5 * est.len());
        for p in &est.positions {
            let offsets = [(0.0, 0.0), (d, 0.0), (-d, 0.0), (0.0, d), (0.0, -d)];
            for (dx, dz) in offsets {
                raw.push(nf_channel(
                    &Position::new(p.x + dx, p.y, p.z + dz),
                    &self.ris,
                    self.wavelength,
                )?);
            }
        }
        let y: Vec<CVec> = raw.iter().map(|r| &a_inv * r).collect();
        let hs: Vec<CVec> = y.iter().map(|v| &self.left * v).collect();
        Ok(RisCrbEvaluator {
            ctx: self,
            r0: profile.r0,
            powers: est.powers.clone(),
            reactance: profile.reactance.clone(),
            a_inv,
            c,
            y,
            hs,
        })
    }
}

/// CRB of the RIS MC-corrected near-field model under single-element
/// reactance changes, via Sherman–Morrison updates of `(ZRR + Ztun)⁻¹`.
pub struct RisCrbEvaluator<'a> {
    ctx: &'a RisNfmcContext,
    r0: f64,
    powers: Vec<f64>,
    reactance: Vec<f64>,
    a_inv: CMat,
    c: CMat,
    /// `A⁻¹ h_raw` for base, `x±`, `z±` of every source.
    y: Vec<CVec>,
    /// `C h_raw` for the same points.
    hs: Vec<CVec>,
}

impl RisCrbEvaluator<'_> {
    pub fn reactance(&self) -> &[f64] {
        &self.reactance
    }

    fn report_of(&self, h: &[CVec]) -> Result<CrbReport> {
        let m = self.powers.len();
        let d = self.ctx.deltas.position_m;
        let mut k0 = CMat::zeros(self.c.nrows(), m);
        let mut terms = Vec::with_capacity(3 * m);
        for s in 0..m {
            let g = self.powers[s];
            let base = &h[5 * s];
            k0.set_column(s, &(base * Complex64::new(g.sqrt(), 0.0)));
            let w = g / (2.0 * d);
            for (up, down) in [(1, 2), (3, 4)] {
                terms.push(DerivTerm {
                    u: CMat::from_columns(&[h[5 * s + up].clone(), h[5 * s + down].clone()]),
                    d: vec![w, -w],
                });
            }
            terms.push(DerivTerm {
                u: CMat::from_columns(std::slice::from_ref(base)),
                d: vec![1.0],
            });
        }
        CrbReport::from_fisher(&fisher_from_terms(
            k0,
            &terms,
            self.ctx.sigma2,
            self.ctx.snapshots,
        )?)
    }

    fn beta(&self, n: usize, value: f64) -> Complex64 {
        let delta = J * (value - self.reactance[n]);
        delta / (Complex64::new(1.0, 0.0) + delta * self.a_inv[(n, n)])
    }

    pub fn crb(&self) -> Result<f64> {
        Ok(self.report_of(&self.hs)?.total)
    }

    pub fn report(&self) -> Result<CrbReport> {
        self.report_of(&self.hs)
    }

    /// CRB with element `n` set to `value`, state unchanged.
    pub fn crb_with(&self, n: usize, value: f64) -> Result<f64> {
        if value == self.reactance[n] {
            return self.crb();
        }
        let beta = self.beta(n, value);
        let cn = self.c.column(n);
        let h: Vec<CVec> = self
            .hs
            .iter()
            .zip(&self.y)
            .map(|(hs, y)| hs - cn * (beta * y[n]))
            .collect();
        Ok(self.report_of(&h)?.total)
    }

    pub fn set(&mut self, n: usize, value: f64) {
        if value == self.reactance[n] {
            return;
        }
        let beta = self.beta(n, value);
        let col = self.a_inv.column(n).into_owned();
        let row = self.a_inv.row(n).into_owned();
        let cn = self.c.column(n).into_owned();
        for (hs, y) in self.hs.iter_mut().zip(self.y.iter_mut()) {
            let yn = y[n];
            *hs -= &cn * (beta * yn);
            *y -= &col * (beta * yn);
        }
        self.a_inv -= (&col * &row) * beta;
        self.c -= (&cn * &row) * beta;
        self.reactance[n] = value;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisOptOptions {
    pub golden_tol_ohm: f64,
    pub golden_max_iter: usize,
    pub max_sweeps: usize,
}

impl Default for RisOptOptions {
    fn default() -> Self {
        Self {
            golden_tol_ohm: 1e-2,
            golden_max_iter: 50,
            max_sweeps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RisOptOutcome {
    pub profile: TunableImpedance,
    pub initial_crb: f64,
    pub final_crb: f64,
    /// CRB after every full sweep, starting with the initial value.
    pub sweep_crb: Vec<f64>,
    /// CRB after every accepted element update, starting with the initial value.
    pub update_trace: Vec<f64>,
    pub sweeps: usize,
    /// The last sweep changed nothing.
    pub converged: bool,
    pub evaluations: usize,
}

/// Relative margin an element update must beat to count as an improvement.
const IMPROVEMENT_MARGIN: f64 = 1e-12;

/// Element-by-element coordinate descent on the CRB. An element keeps its
/// value unless the best candidate is strictly better; sweeps repeat until
/// one changes nothing or the sweep cap is reached.
pub fn optimize_ris_profile(
    eval: &mut RisCrbEvaluator<'_>,
    area: &OptimizationArea,
    opts: &RisOptOptions,
) -> Result<RisOptOutcome> {
    area.validate()?;
    if let Some(n) = eval.reactance.iter().position(|&f| !area.contains(f)) {
        return Err(Error::Element {
            element: n,
            source: Box::new(Error::invalid(
                "initial reactance lies outside the optimization area",
            )),
        });
    }
    let elements = eval.reactance.len();
    let mut current = eval.crb()?;
    let initial = current;
    let mut evaluations = 1;
    let mut sweep_crb = vec![current];
    let mut update_trace = vec![current];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for n in 0..elements {
            let wrap = |e: Error| Error::Element {
                element: n,
                source: Box::new(e),
            };
            let (best_value, best_crb) = match area {
                OptimizationArea::FiniteAlphabet { values_ohm } => {
                    let mut best = (eval.reactance[n], current);
                    for &v in values_ohm {
                        if v == eval.reactance[n] {
                            continue;
                        }
                        let c = eval.crb_with(n, v).map_err(wrap)?;
                        evaluations += 1;
                        if c < best.1 {
                            best = (v, c);
                        }
                    }
                    best
                }
                OptimizationArea::Continuous {
                    lower_ohm,
                    upper_ohm,
                } => {
                    let m = golden_section(
                        |v| eval.crb_with(n, v),
                        *lower_ohm,
                        *upper_ohm,
                        opts.golden_tol_ohm,
                        opts.golden_max_iter,
                    )
                    .map_err(wrap)?;
                    evaluations += m.evaluations;
                    (m.x, m.f)
                }
            };
            if best_crb < current * (1.0 - IMPROVEMENT_MARGIN) && best_value != eval.reactance[n] {
                eval.set(n, best_value);
                current = best_crb;
                update_trace.push(current);
                changed = true;
            }
        }
        sweep_crb.push(current);
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(RisOptOutcome {
        profile: TunableImpedance {
            r0: eval.r0,
            reactance: eval.reactance.clone(),
        },
        initial_crb: initial,
        final_crb: current,
        sweep_crb,
        update_trace,
        sweeps,
        converged,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub t1: usize,
    pub t2: usize,
    pub area: OptimizationArea,
    pub r0_ohm: f64,
    /// Standard deviation of the random stage-1 reactances.
    pub random_std_ohm: f64,
    pub alphabet: SymbolAlphabet,
    pub opt: RisOptOptions,
    pub beta: f64,
    pub deltas: FisherDeltas,
}

impl TwoStageConfig {
    pub fn new(t1: usize, t2: usize, area: OptimizationArea, beta: f64) -> Self {
        Self {
            t1,
            t2,
            area,
            r0_ohm: 0.2,
            random_std_ohm: 100.0,
            alphabet: SymbolAlphabet::Qpsk,
            opt: RisOptOptions::default(),
            beta,
            deltas: FisherDeltas::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutcome {
    pub initial_profile: TunableImpedance,
    /// `M̃` from stage-1 MDL.
    pub stage1_sources: usize,
    /// MUSIC positions and power estimates under the random profile.
    pub stage1_estimate: Option<EstimateVector>,
    pub optimization: Option<RisOptOutcome>,
    /// Why the profile optimization was skipped, if it was.
    pub optimization_error: Option<String>,
    pub final_profile: TunableImpedance,
    pub result: LocalizationResult,
    /// Stage 1 detected no source; stage 2 was not run.
    pub early_exit: bool,
}

/// RIS-assisted localization with a stage-1 random profile and a stage-2
/// profile optimized for the stage-1 estimate under the MC-corrected
/// near-field model.
pub struct RisLocalizer<'a> {
    system: &'a EmSystem,
    sigma2: f64,
    raw_grid: GridManifold,
    ctx: RisNfmcContext,
    pub config: TwoStageConfig,
}

impl<'a> RisLocalizer<'a> {
    pub fn new(
        system: &'a EmSystem,
        sigma2: f64,
        grid: &SearchGrid,
        config: TwoStageConfig,
    ) -> Result<Self> {
        config.area.validate()?;
        let ris = system
            .ris()
            .ok_or_else(|| Error::invalid("two-stage localization needs a RIS layout"))?;
        if config.t1 == 0 || config.t2 == 0 {
            return Err(Error::invalid("both stages need at least one snapshot"));
        }
        let raw = MismatchedModel::uncorrected(Wavefront::Near, ris.clone(), system.wavelength());
        Ok(Self {
            system,
            sigma2,
            raw_grid: GridManifold::new(&raw, grid)?,
            ctx: RisNfmcContext::new(system, sigma2, config.t2, config.deltas)?,
            config,
        })
    }

    pub fn context(&self) -> &RisNfmcContext {
        &self.ctx
    }

    pub fn grid(&self) -> &SearchGrid {
        self.raw_grid.grid()
    }

    fn model(&self, profile: &TunableImpedance) -> Result<MismatchedModel> {
        MismatchedModel::for_system(
            self.system,
            ChannelModelKind::Nfmc,
            Link::RisOnly,
            Some(profile),
        )
    }

    fn receive<R: Rng + ?Sized>(
        &self,
        profile: &TunableImpedance,
        sources: &[Position],
        powers: &[f64],
        t: usize,
        rng: &mut R,
    ) -> Result<CMat> {
        let h = self
            .system
            .prepare(Some(profile), Link::RisOnly)?
            .channel(sources)?;
        generate_received(&h, powers, self.sigma2, t, self.config.alphabet, rng)
    }

    pub fn localize<R: Rng + ?Sized>(
        &self,
        sources: &[Position],
        powers: &[f64],
        rng: &mut R,
    ) -> Result<TwoStageOutcome> {
        let cfg = &self.config;
        let initial =
            TunableImpedance::random(self.ctx.num_elements(), cfg.r0_ohm, cfg.random_std_ohm, rng)?;
        let x1 = self.receive(&initial, sources, powers, cfg.t1, rng)?;
        let m_tilde = estimate_num_sources_mdl(&x1)?;
        if m_tilde == 0 {
            return Ok(TwoStageOutcome {
                final_profile: initial.clone(),
                initial_profile: initial,
                stage1_sources: 0,
                stage1_estimate: None,
                optimization: None,
                optimization_error: None,
                result: LocalizationResult::empty(),
                early_exit: true,
            });
        }
        let mm1 = self.model(&initial)?;
        let manifold1 = self
            .raw_grid
            .mapped(mm1.correction().expect("MC-corrected"))?;
        let r1 = sample_covariance(&x1);
        let peaks = music_peaks(&music_spectrum(&r1, m_tilde, &manifold1)?, m_tilde);
        if peaks.positions.is_empty() {
            return Err(Error::Numeric(
                "stage-1 MUSIC spectrum has no finite local maximum".into(),
            ));
        }
        let g1 = estimate_powers(&mm1.channel(&peaks.positions)?, &r1, self.sigma2)?;
        let est = EstimateVector::new(peaks.positions.clone(), g1)?;

        let start = cfg.area.project_profile(&initial);
        let (optimization, optimization_error, final_profile) = match self
            .ctx
            .evaluator(&est, &start)
            .and_then(|mut ev| optimize_ris_profile(&mut ev, &cfg.area, &cfg.opt))
        {
            Ok(out) => {
                let p = out.profile.clone();
                (Some(out), None, p)
            }
            Err(e) => (None, Some(e.to_string()), start),
        };

        let x2 = self.receive(&final_profile, sources, powers, cfg.t2, rng)?;
        let mm2 = self.model(&final_profile)?;
        let manifold2 = self
            .raw_grid
            .mapped(mm2.correction().expect("MC-corrected"))?;
        let stage2 = Localizer {
            mm: &mm2,
            sigma2: self.sigma2,
            coarse: manifold2,
            remediation: None,
            beta: cfg.beta,
            ml: MlOptions::for_grid(self.raw_grid.grid()),
            fixed_sources: Some(peaks.positions.len()),
        };
        let result = stage2.localize(&x2)?;
        Ok(TwoStageOutcome {
            initial_profile: initial,
            stage1_sources: m_tilde,
            stage1_estimate: Some(est),
            optimization,
            optimization_error,
            final_profile,
            result,
            early_exit: false,
        })
    }
}

/// Convenience check used by reports: LR classification of a fixed
/// position/power hypothesis under a channel model.
pub fn classify_hypothesis(
    x: &CMat,
    model: &dyn ChannelModel,
    est: &EstimateVector,
    sigma2: f64,
    beta: f64,
) -> Result<Classification> {
    let h = model.channel(&est.positions)?;
    let lr = likelihood_ratio_low_rank(x, &LowRankCovariance::new(&h, &est.powers, sigma2)?)?;
    Ok(classify(lr, beta).classification)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_ris_layout, build_uniform_array, DipoleDims};
    use crate::signal::{dbm_to_watts, model_covariance, trial_rng};
    use std::f64::consts::PI;

    const LAMBDA: f64 = 299_792_458.0 / 28e9;

    fn small_ris_system() -> EmSystem {
        let dims = DipoleDims::half_wave(LAMBDA);
        let bs = build_uniform_array(4, 4, LAMBDA / 2.0, LAMBDA / 2.0, dims).unwrap();
        let ris = build_ris_layout(
            4,
            4,
            LAMBDA / 2.0,
            LAMBDA / 2.0,
            Position::new(1.0, 0.0, 1.0),
            PI / 2.0,
            dims,
        )
        .unwrap();
        EmSystem::new(
            bs,
            Some(ris),
            LAMBDA,
            Complex64::new(50.0, 0.0),
            Complex64::new(50.0, 0.0),
            dims,
        )
        .unwrap()
    }

    fn direct_system() -> EmSystem {
        let dims = DipoleDims::half_wave(LAMBDA);
        let bs = build_uniform_array(4, 4, LAMBDA / 2.0, LAMBDA / 2.0, dims).unwrap();
        EmSystem::new(
            bs,
            None,
            LAMBDA,
            Complex64::new(50.0, 0.0),
            Complex64::new(50.0, 0.0),
            dims,
        )
        .unwrap()
    }

    #[test]
    fn q_metric_basics() {
        let sys = direct_system();
        let tm = sys.prepare(None, Link::Direct).unwrap();
        let p0 = Position::new(-1.0, -0.5, 3.0);
        assert_eq!(q_metric_at(&tm, &p0, &p0).unwrap(), 0.0);
        let a = CVec::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        let b = CVec::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(0.0, 2.0)]);
        assert_eq!(q_metric(&a, &b).unwrap(), 1.0);
        assert!(q_metric(&CVec::zeros(2), &b).is_err());
        let scaled = &a * Complex64::new(0.3, -2.0);
        assert!(q_metric(&scaled, &a).unwrap() < 1e-15);
    }

    #[test]
    fn structured_fisher_matches_dense() {
        let sys = direct_system();
        let tm = sys.prepare(None, Link::Direct).unwrap();
        let sigma2 = dbm_to_watts(-87.0);
        let est = EstimateVector::new(
            vec![
                Position::new(-1.0, -0.5, 3.0),
                Position::new(-1.4, -0.5, 3.4),
            ],
            vec![dbm_to_watts(10.0), dbm_to_watts(13.0)],
        )
        .unwrap();
        let deltas = FisherDeltas::default();
        let fast = fisher_information(&tm, &est, sigma2, 10, &deltas).unwrap();
        let dense = fisher_information_dense(
            |q| {
                let e = est.from_params(q);
                model_covariance(&tm.channel(&e.positions)?, &e.powers, sigma2)
            },
            &est.params(),
            &est.steps(&deltas),
            10,
        )
        .unwrap();
        let rel = (&fast - &dense).norm() / dense.norm();
        assert!(rel < 1e-6, "relative difference {rel}");
        assert!((&fast - fast.transpose()).norm() <= 1e-12 * fast.norm());
    }

    #[test]
    fn dense_fisher_of_manufactured_covariance() {
        // R(q) = (1 + q0² + q0 q1) I + q1 E, E = all-ones 2×2; derivatives known.
        let e = CMat::from_element(2, 2, Complex64::new(1.0, 0.0));
        let cov = |q: &[f64]| -> Result<CMat> {
            Ok(
                CMat::identity(2, 2) * Complex64::new(1.0 + q[0] * q[0] + q[0] * q[1], 0.0)
                    + &e * Complex64::new(q[1], 0.0),
            )
        };
        let q = [0.4, 0.3];
        let r = cov(&q).unwrap();
        let d0 = CMat::identity(2, 2) * Complex64::new(2.0 * q[0] + q[1], 0.0);
        let d1 = CMat::identity(2, 2) * Complex64::new(q[0], 0.0) + &e;
        let ri = r.clone().try_inverse().unwrap();
        let exact = |a: &CMat, b: &CMat| (&ri * a * &ri * b).trace().re * 5.0;
        let want = [
            [exact(&d0, &d0), exact(&d0, &d1)],
            [exact(&d1, &d0), exact(&d1, &d1)],
        ];
        let mut errs = Vec::new();
        for h in [1e-2, 5e-3] {
            let got = fisher_information_dense(cov, &q, &[h, h], 5).unwrap();
            let err = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| (got[(i, j)] - want[i][j]).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // Quadratic dependence: central differences are exact up to rounding.
        assert!(errs.iter().all(|&e| e < 1e-9), "{errs:?}");
    }

    #[test]
    fn crb_scales_with_snapshots() {
        let sys = direct_system();
        let tm = sys.prepare(None, Link::Direct).unwrap();
        let sigma2 = dbm_to_watts(-87.0);
        let est = EstimateVector::new(
            vec![Position::new(-1.0, -0.5, 3.0)],
            vec![dbm_to_watts(10.0)],
        )
        .unwrap();
        let d = FisherDeltas::default();
        let a = crb(&tm, &est, sigma2, 10, &d).unwrap();
        let b = crb(&tm, &est, sigma2, 20, &d).unwrap();
        assert!((a.total / b.total - 2f64.sqrt()).abs() < 1e-9);
        let hi = EstimateVector::new(est.positions.clone(), vec![dbm_to_watts(20.0)]).unwrap();
        let c = crb(&tm, &hi, sigma2, 10, &d).unwrap();
        assert!(c.per_source[0].x_m < a.per_source[0].x_m);
    }

    #[test]
    fn singular_fisher_is_unidentifiable() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(crb_matrix(&j), Err(Error::Unidentifiable(_))));
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(crb_matrix(&j), Err(Error::Unidentifiable(_))));
    }

    #[test]
    fn areas() {
        assert!(OptimizationArea::fa2(100.0).validate().is_ok());
        assert!(OptimizationArea::FiniteAlphabet {
            values_ohm: vec![1.0, 1.0]
        }
        .validate()
        .is_err());
        assert!(OptimizationArea::Continuous {
            lower_ohm: 1.0,
            upper_ohm: 1.0
        }
        .validate()
        .is_err());
        let fa1 = OptimizationArea::fa1(100.0);
        assert_eq!(fa1.project(140.0), 100.0);
        assert_eq!(fa1.project(-1e4), -200.0);
        assert_eq!(OptimizationArea::continuous(500.0).project(-900.0), -500.0);
    }

    fn ris_setup(sys: &EmSystem) -> (RisNfmcContext, EstimateVector) {
        let ctx =
            RisNfmcContext::new(sys, dbm_to_watts(-120.0), 10, FisherDeltas::default()).unwrap();
        let est = EstimateVector::new(
            vec![Position::new(0.0, -1.0, 2.0)],
            vec![dbm_to_watts(20.0)],
        )
        .unwrap();
        (ctx, est)
    }

    #[test]
    fn incremental_crb_matches_direct_evaluation() {
        let sys = small_ris_system();
        let (ctx, est) = ris_setup(&sys);
        let mut rng = trial_rng(3, 0);
        let profile = TunableImpedance::random(16, 0.2, 100.0, &mut rng).unwrap();
        let mut ev = ctx.evaluator(&est, &profile).unwrap();
        let direct = |f: &TunableImpedance| {
            let mm =
                MismatchedModel::for_system(&sys, ChannelModelKind::Nfmc, Link::RisOnly, Some(f))
                    .unwrap();
            crb(&mm, &est, ctx.sigma2, 10, &ctx.deltas).unwrap().total
        };
        let base = direct(&profile);
        assert!(
            (ev.crb().unwrap() / base - 1.0).abs() < 1e-8,
            "{} vs {base}",
            ev.crb().unwrap()
        );
        let mut changed = profile.clone();
        changed.reactance[5] = 250.0;
        let want = direct(&changed);
        assert!((ev.crb_with(5, 250.0).unwrap() / want - 1.0).abs() < 1e-8);
        ev.set(5, 250.0);
        ev.set(2, -40.0);
        changed.reactance[2] = -40.0;
        assert!((ev.crb().unwrap() / direct(&changed) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn coordinate_descent_is_monotone_and_terminates() {
        let sys = small_ris_system();
        let (ctx, est) = ris_setup(&sys);
        let mut rng = trial_rng(4, 0);
        let area = OptimizationArea::fa2(100.0);
        let start =
            area.project_profile(&TunableImpedance::random(16, 0.2, 100.0, &mut rng).unwrap());
        let mut ev = ctx.evaluator(&est, &start).unwrap();
        let out = optimize_ris_profile(&mut ev, &area, &RisOptOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.update_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.final_crb <= out.initial_crb);
        assert!(out.profile.reactance.iter().all(|f| area.contains(*f)));
        // No single flip improves the converged profile.
        let ev = ctx.evaluator(&est, &out.profile).unwrap();
        let c = ev.crb().unwrap();
        for n in 0..16 {
            let other = -out.profile.reactance[n];
            assert!(ev.crb_with(n, other).unwrap() >= c * (1.0 - 1e-9));
        }
    }

    #[test]
    fn out_of_area_start_is_rejected() {
        let sys = small_ris_system();
        let (ctx, est) = ris_setup(&sys);
        let start = TunableImpedance::new(0.2, vec![7.0; 16]).unwrap();
        let mut ev = ctx.evaluator(&est, &start).unwrap();
        let err = optimize_ris_profile(
            &mut ev,
            &OptimizationArea::fa2(100.0),
            &RisOptOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Element { element: 0, .. }));
    }

    #[test]
    fn two_stage_runs_end_to_end() {
        let sys = small_ris_system();
        let p = Position::new(-1.5, -1.0, 5.0);
        let grid = SearchGrid::centred(&p, 1.0, 1.0, 11, 11).unwrap();
        let cfg = TwoStageConfig::new(10, 10, OptimizationArea::fa2(100.0), 0.32);
        let loc = RisLocalizer::new(&sys, dbm_to_watts(-120.0), &grid, cfg).unwrap();
        let mut rng = trial_rng(5, 0);
        let out = loc.localize(&[p], &[dbm_to_watts(10.0)], &mut rng).unwrap();
        assert!(!out.early_exit);
        assert_eq!(out.stage1_sources, 1);
        let opt = out.optimization.expect("optimization ran");
        assert!(opt.final_crb <= opt.initial_crb);
        assert_eq!(out.result.positions.len(), 1);
        let mut noise_only = trial_rng(5, 1);
        let silent = loc.localize(&[p], &[0.0], &mut noise_only).unwrap();
        assert!(silent.early_exit);
    }
}

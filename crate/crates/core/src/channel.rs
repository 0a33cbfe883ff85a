//! True electromagnetic channel and the simplified near/far-field manifolds.
//!
//! The true model is the impedance-based MIMO transfer
//! `H = Ψ0⁻¹ Ψrt (Ψtt + Zt)⁻¹` with
//!
//! ```text
//! Ψ0  = I + Ψrr Zr⁻¹ − Ψrt (Ψtt + Zt)⁻¹ Ψrtᵀ
//! Ψrr = Zrr − ZrR (ZRR + Ztun)⁻¹ ZrRᵀ
//! Ψrt = Zrt − ZrR (ZRR + Ztun)⁻¹ ZRt
//! ```
//!
//! The direct link drops the RIS terms; the RIS-only link drops `Zrt`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_sources, DipoleDims, ElementLayout, Position};
use crate::impedance::{coupling_matrix, impedance_matrix};
use crate::linalg::{inverse_checked, CMat, CVec, J};

/// RIS load impedances `diag(R0 + j f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunableImpedance {
    pub r0: f64,
    pub reactance: Vec<f64>,
}

impl TunableImpedance {
    pub fn new(r0: f64, reactance: Vec<f64>) -> Result<Self> {
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(Error::invalid("R0 must be positive"));
        }
        if reactance.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("tunable reactances must be finite"));
        }
        Ok(Self { r0, reactance })
    }

    /// Reactances drawn i.i.d. from a zero-mean real Gaussian with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(n: usize, r0: f64, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(r0, (0..n).map(|_| normal.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.reactance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reactance.is_empty()
    }

    pub fn load(&self, n: usize) -> Complex64 {
        Complex64::new(self.r0, self.reactance[n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelModelKind {
    TmDirect,
    TmRis,
    Nf,
    Ff,
    Nfmc,
    Ffmc,
}

impl ChannelModelKind {
    pub fn is_true_model(self) -> bool {
        matches!(self, Self::TmDirect | Self::TmRis)
    }

    pub fn is_mc_corrected(self) -> bool {
        matches!(self, Self::Nfmc | Self::Ffmc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TmDirect => "TM_DIRECT",
            Self::TmRis => "TM_RIS",
            Self::Nf => "NF",
            Self::Ff => "FF",
            Self::Nfmc => "NFMC",
            Self::Ffmc => "FFMC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    General,
    Direct,
    RisOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub h: CMat,
    pub kind: ChannelModelKind,
}

/// Anything that maps source positions to an `N × M` channel matrix seen at the BS.
pub trait ChannelModel: Sync {
    fn num_receivers(&self) -> usize;
    fn kind(&self) -> ChannelModelKind;
    fn channel(&self, sources: &[Position]) -> Result<CMat>;
}

struct RisImpedances {
    layout: ElementLayout,
    z_ris: CMat,
    z_bs_ris: CMat,
}

/// Fixed receiver geometry with its impedance matrices evaluated once.
pub struct EmSystem {
    wavelength: f64,
    bs: ElementLayout,
    ris: Option<RisImpedances>,
    z_bs: CMat,
    receiver_load: Vec<Complex64>,
    source_internal: Complex64,
    source_dims: DipoleDims,
}

impl EmSystem {
    /// `receiver_load` is the diagonal of `Zr`, `source_internal` the common diagonal of `Zt`.
    pub fn new(
        bs: ElementLayout,
        ris: Option<ElementLayout>,
        wavelength: f64,
        receiver_load: Complex64,
        source_internal: Complex64,
        source_dims: DipoleDims,
    ) -> Result<Self> {
        if receiver_load.norm() == 0.0 {
            return Err(Error::invalid("receiver load impedance must be non-zero"));
        }
        let z_bs = coupling_matrix(&bs, wavelength)?;
        let ris = match ris {
            Some(layout) => {
                let z_ris = coupling_matrix(&layout, wavelength)?;
                let z_bs_ris = impedance_matrix(&bs, &layout, wavelength)?;
                Some(RisImpedances {
                    layout,
                    z_ris,
                    z_bs_ris,
                })
            }
            None => None,
        };
        let n = bs.len();
        Ok(Self {
            wavelength,
            bs,
            ris,
            z_bs,
            receiver_load: vec![receiver_load; n],
            source_internal,
            source_dims,
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn bs(&self) -> &ElementLayout {
        &self.bs
    }

    pub fn ris(&self) -> Option<&ElementLayout> {
        self.ris.as_ref().map(|r| &r.layout)
    }

    pub fn source_dims(&self) -> DipoleDims {
        self.source_dims
    }

    /// `Zrr`, BS mutual impedances.
    pub fn z_bs(&self) -> &CMat {
        &self.z_bs
    }

    /// `ZRR`, RIS mutual impedances.
    pub fn z_ris(&self) -> Option<&CMat> {
        self.ris.as_ref().map(|r| &r.z_ris)
    }

    /// `ZrR`, BS-to-RIS mutual impedances.
    pub fn z_bs_ris(&self) -> Option<&CMat> {
        self.ris.as_ref().map(|r| &r.z_bs_ris)
    }

    pub fn receiver_load(&self) -> &[Complex64] {
        &self.receiver_load
    }

    /// Fixes the RIS profile and link, precomputing everything that does not
    /// depend on the source positions.
    pub fn prepare(&self, ztun: Option<&TunableImpedance>, link: Link) -> Result<PreparedEm<'_>> {
        let link = match (link, &self.ris) {
            (Link::General, None) => Link::Direct,
            (Link::RisOnly, None) => {
                return Err(Error::invalid("RIS-only link requires a RIS layout"))
            }
            (l, _) => l,
        };
        let mut psi_rr = self.z_bs.clone();
        let mut ris_gain = None;
        if link != Link::Direct {
            let ris = self.ris.as_ref().expect("link checked above");
            let ztun = ztun
                .ok_or_else(|| Error::invalid("RIS link requires a tunable impedance profile"))?;
            if ztun.len() != ris.layout.len() {
                return Err(Error::invalid(format!(
                    "profile has {} entries, RIS has {} elements",
                    ztun.len(),
                    ris.layout.len()
                )));
            }
            let mut a = ris.z_ris.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += ztun.load(i);
            }
            let a_inv = inverse_checked(&a, "Z_RR + Z_tun")?;
            let w = &ris.z_bs_ris * a_inv;
            psi_rr -= &w * ris.z_bs_ris.transpose();
            ris_gain = Some(w);
        }
        let n = self.bs.len();
        let mut base = CMat::identity(n, n);
        for j in 0..n {
            let inv_load = self.receiver_load[j].inv();
            for i in 0..n {
                base[(i, j)] += psi_rr[(i, j)] * inv_load;
            }
        }
        Ok(PreparedEm {
            system: self,
            link,
            psi0_base: base,
            ris_gain,
        })
    }
}

/// [`EmSystem`] with the RIS profile and link fixed.
pub struct PreparedEm<'a> {
    system: &'a EmSystem,
    link: Link,
    /// `I + Ψrr Zr⁻¹`
    psi0_base: CMat,
    /// `ZrR (ZRR + Ztun)⁻¹`
    ris_gain: Option<CMat>,
}

impl PreparedEm<'_> {
    pub fn link(&self) -> Link {
        self.link
    }

    pub fn system(&self) -> &EmSystem {
        self.system
    }

    /// `Zrr`-free transmit term `Ψrt` for the given sources.
    fn psi_rt(&self, sources: &ElementLayout) -> Result<CMat> {
        let sys = self.system;
        let direct = match self.link {
            Link::RisOnly => None,
            _ => Some(impedance_matrix(&sys.bs, sources, sys.wavelength)?),
        };
        let via_ris = match (&self.ris_gain, &sys.ris) {
            (Some(w), Some(ris)) => {
                Some(w * impedance_matrix(&ris.layout, sources, sys.wavelength)?)
            }
            _ => None,
        };
        Ok(match (direct, via_ris) {
            (Some(d), Some(r)) => d - r,
            (Some(d), None) => d,
            (None, Some(r)) => -r,
            (None, None) => unreachable!("a link always has at least one path"),
        })
    }

    pub fn channel_matrix(&self, positions: &[Position]) -> Result<ChannelMatrix> {
        let sys = self.system;
        let sources = build_sources(positions, sys.source_dims)?;
        let mut psi_tt = coupling_matrix(&sources, sys.wavelength)?;
        for i in 0..psi_tt.nrows() {
            psi_tt[(i, i)] += sys.source_internal;
        }
        let t_inv = inverse_checked(&psi_tt, "Ψ_tt + Z_t")?;
        let psi_rt = self.psi_rt(&sources)?;
        let drive = &psi_rt * t_inv;
        let psi0 = &self.psi0_base - &drive * psi_rt.transpose();
        let h = inverse_checked(&psi0, "Ψ_0")? * drive;
        let kind = match self.link {
            Link::Direct => ChannelModelKind::TmDirect,
            _ => ChannelModelKind::TmRis,
        };
        Ok(ChannelMatrix { h, kind })
    }
}

impl ChannelModel for PreparedEm<'_> {
    fn num_receivers(&self) -> usize {
        self.system.bs.len()
    }

    fn kind(&self) -> ChannelModelKind {
        match self.link {
            Link::Direct => ChannelModelKind::TmDirect,
            _ => ChannelModelKind::TmRis,
        }
    }

    fn channel(&self, sources: &[Position]) -> Result<CMat> {
        Ok(self.channel_matrix(sources)?.h)
    }
}

/// One-shot true-model channel: assembles all impedance matrices for the given geometry.
#[allow(clippy::too_many_arguments)]
pub fn em_channel(
    sources: &[Position],
    source_dims: DipoleDims,
    bs: &ElementLayout,
    ris: Option<&ElementLayout>,
    ztun: Option<&TunableImpedance>,
    source_internal: Complex64,
    receiver_load: Complex64,
    wavelength: f64,
    link: Link,
) -> Result<ChannelMatrix> {
    let system = EmSystem::new(
        bs.clone(),
        ris.cloned(),
        wavelength,
        receiver_load,
        source_internal,
        source_dims,
    )?;
    system.prepare(ztun, link)?.channel_matrix(sources)
}

/// Spherical-wavefront channel `λ/(4π‖p − r_n‖) · exp(−j 2π/λ ‖p − r_n‖)`.
pub fn nf_channel(p: &Position, elems: &ElementLayout, wavelength: f64) -> Result<CVec> {
    let k = 2.0 * PI / wavelength;
    let mut h = CVec::zeros(elems.len());
    for (n, r) in elems.positions().enumerate() {
        let d = (p - r).norm();
        if d <= 0.0 {
            return Err(Error::invalid("source coincides with an array element"));
        }
        h[n] = (-J * (k * d)).exp() * (wavelength / (4.0 * PI * d));
    }
    Ok(h)
}

/// Plane-wavefront channel referenced to the layout origin: constant amplitude
/// `λ/(4π‖p − o‖)` and phase `k(‖p − o‖ − u·(r_n − o))` with `u` the unit
/// direction to the source.
pub fn ff_channel(p: &Position, elems: &ElementLayout, wavelength: f64) -> Result<CVec> {
    let k = 2.0 * PI / wavelength;
    let rel = p - elems.origin;
    let dist = rel.norm();
    if dist <= 0.0 {
        return Err(Error::invalid("far-field source at the layout origin"));
    }
    let u = rel / dist;
    let alpha_d = (-J * (k * dist)).exp() * (wavelength / (4.0 * PI * dist));
    let mut h = CVec::zeros(elems.len());
    for (n, r) in elems.positions().enumerate() {
        let phi_n = -k * u.dot(&(r - elems.origin));
        h[n] = alpha_d * (-J * phi_n).exp();
    }
    Ok(h)
}

fn loaded(z_r: &[Complex64], z_rr: &CMat) -> Result<CMat> {
    let n = z_rr.nrows();
    if z_r.len() != n || !z_rr.is_square() {
        return Err(Error::invalid("Z_r and Z_rr dimensions disagree"));
    }
    let mut a = z_rr.clone();
    for i in 0..n {
        a[(i, i)] += z_r[i];
    }
    inverse_checked(&a, "Z_r + Z_rr")
}

fn scale_rows(z_r: &[Complex64], m: CMat) -> CMat {
    let mut m = m;
    for (i, mut row) in m.row_iter_mut().enumerate() {
        row *= z_r[i];
    }
    m
}

/// Direct-link coupling correction `Zr (Zr + Zrr)⁻¹`, `N × N`.
pub fn mc_correction_direct(z_r: &[Complex64], z_rr: &CMat) -> Result<CMat> {
    Ok(scale_rows(z_r, loaded(z_r, z_rr)?))
}

/// RIS coupling correction `−Zr (Zr + Zrr)⁻¹ ZrR (ZRR + Ztun)⁻¹`, `N × N_R`.
pub fn mc_correction_ris(
    z_r: &[Complex64],
    z_rr: &CMat,
    z_bs_ris: &CMat,
    z_ris: &CMat,
    ztun: &TunableImpedance,
) -> Result<CMat> {
    if ztun.len() != z_ris.nrows() || z_bs_ris.ncols() != z_ris.nrows() {
        return Err(Error::invalid("RIS impedance dimensions disagree"));
    }
    let mut a = z_ris.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ztun.load(i);
    }
    let a_inv = inverse_checked(&a, "Z_RR + Z_tun")?;
    let left = scale_rows(z_r, loaded(z_r, z_rr)?);
    Ok(-(left * z_bs_ris * a_inv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wavefront {
    Near,
    Far,
}

/// Near- or far-field manifold towards a target layout (the BS, or the RIS
/// for RIS-assisted links), optionally mapped to the BS by a coupling
/// correction matrix.
#[derive(Debug, Clone)]
pub struct MismatchedModel {
    wavefront: Wavefront,
    target: ElementLayout,
    correction: Option<CMat>,
    wavelength: f64,
}

impl MismatchedModel {
    pub fn uncorrected(wavefront: Wavefront, bs: ElementLayout, wavelength: f64) -> Self {
        Self {
            wavefront,
            target: bs,
            correction: None,
            wavelength,
        }
    }

    pub fn corrected(
        wavefront: Wavefront,
        target: ElementLayout,
        correction: CMat,
        wavelength: f64,
    ) -> Result<Self> {
        if correction.ncols() != target.len() {
            return Err(Error::invalid(format!(
                "correction has {} columns, target layout {} elements",
                correction.ncols(),
                target.len()
            )));
        }
        Ok(Self {
            wavefront,
            target,
            correction: Some(correction),
            wavelength,
        })
    }

    /// Builds the requested mismatched kind for a system. RIS-assisted
    /// systems must use an MC-corrected kind, since only the correction maps
    /// RIS-element channels to the BS.
    pub fn for_system(
        system: &EmSystem,
        kind: ChannelModelKind,
        link: Link,
        ztun: Option<&TunableImpedance>,
    ) -> Result<Self> {
        let wavefront = match kind {
            ChannelModelKind::Nf | ChannelModelKind::Nfmc => Wavefront::Near,
            ChannelModelKind::Ff | ChannelModelKind::Ffmc => Wavefront::Far,
            _ => return Err(Error::invalid("true-model kinds are not mismatched models")),
        };
        let uses_ris = link == Link::RisOnly;
        match (kind.is_mc_corrected(), uses_ris) {
            (false, false) => Ok(Self::uncorrected(
                wavefront,
                system.bs().clone(),
                system.wavelength(),
            )),
            (true, false) => {
                let c = mc_correction_direct(system.receiver_load(), system.z_bs())?;
                Self::corrected(wavefront, system.bs().clone(), c, system.wavelength())
            }
            (true, true) => {
                let ztun =
                    ztun.ok_or_else(|| Error::invalid("RIS correction needs the tunable profile"))?;
                let (z_ris, z_bs_ris) = system
                    .z_ris()
                    .zip(system.z_bs_ris())
                    .ok_or_else(|| Error::invalid("RIS correction needs a RIS layout"))?;
                let c = mc_correction_ris(
                    system.receiver_load(),
                    system.z_bs(),
                    z_bs_ris,
                    z_ris,
                    ztun,
                )?;
                Self::corrected(
                    wavefront,
                    system.ris().expect("checked").clone(),
                    c,
                    system.wavelength(),
                )
            }
            (false, true) => Err(Error::invalid(
                "RIS-assisted localization requires an MC-corrected model (NFMC or FFMC)",
            )),
        }
    }

    pub fn wavefront(&self) -> Wavefront {
        self.wavefront
    }

    pub fn target(&self) -> &ElementLayout {
        &self.target
    }

    pub fn correction(&self) -> Option<&CMat> {
        self.correction.as_ref()
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Channel from the source to the target layout, before correction.
    pub fn raw_manifold(&self, p: &Position) -> Result<CVec> {
        match self.wavefront {
            Wavefront::Near => nf_channel(p, &self.target, self.wavelength),
            Wavefront::Far => ff_channel(p, &self.target, self.wavelength),
        }
    }

    /// Channel seen at the BS for a single source at `p`.
    pub fn manifold(&self, p: &Position) -> Result<CVec> {
        let raw = self.raw_manifold(p)?;
        Ok(match &self.correction {
            Some(c) => c * raw,
            None => raw,
        })
    }
}

impl ChannelModel for MismatchedModel {
    fn num_receivers(&self) -> usize {
        match &self.correction {
            Some(c) => c.nrows(),
            None => self.target.len(),
        }
    }

    fn kind(&self) -> ChannelModelKind {
        match (self.wavefront, self.correction.is_some()) {
            (Wavefront::Near, false) => ChannelModelKind::Nf,
            (Wavefront::Far, false) => ChannelModelKind::Ff,
            (Wavefront::Near, true) => ChannelModelKind::Nfmc,
            (Wavefront::Far, true) => ChannelModelKind::Ffmc,
        }
    }

    fn channel(&self, sources: &[Position]) -> Result<CMat> {
        let cols = sources
            .iter()
            .map(|p| self.manifold(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(CMat::from_columns(&cols))
    }
}

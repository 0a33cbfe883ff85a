//! Reference geometries: 28 GHz half-wave dipoles, an 8×8 BS array at the
//! origin and an optional 10×10 RIS at `[1, 0, 1]` m facing the sources.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::EmSystem;
use crate::error::{Error, Result};
use crate::geometry::{
    build_min_redundancy_layout, build_min_redundancy_ris, build_ris_layout, build_uniform_array,
    DipoleDims, ElementLayout, Position, RedundancyPattern,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const CARRIER_HZ: f64 = 28e9;

/// Gaps (in minimum spacings) of the 8-element minimum-redundancy axis.
pub const BS_MIN_REDUNDANCY: [u32; 7] = [1, 3, 6, 6, 2, 3, 2];
/// Gaps of the 10-element minimum-redundancy axis.
pub const RIS_MIN_REDUNDANCY: [u32; 9] = [1, 2, 3, 7, 7, 7, 4, 4, 1];

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayLayout {
    Uniform { nh: usize, nv: usize },
    MinRedundancy { gaps_h: Vec<u32>, gaps_v: Vec<u32> },
}

impl ArrayLayout {
    pub fn uniform_bs() -> Self {
        Self::Uniform { nh: 8, nv: 8 }
    }

    pub fn uniform_ris() -> Self {
        Self::Uniform { nh: 10, nv: 10 }
    }

    pub fn min_redundancy_bs() -> Self {
        Self::MinRedundancy {
            gaps_h: BS_MIN_REDUNDANCY.to_vec(),
            gaps_v: BS_MIN_REDUNDANCY.to_vec(),
        }
    }

    pub fn min_redundancy_ris() -> Self {
        Self::MinRedundancy {
            gaps_h: RIS_MIN_REDUNDANCY.to_vec(),
            gaps_v: RIS_MIN_REDUNDANCY.to_vec(),
        }
    }

    fn patterns(&self, spacing: f64) -> Result<Option<(RedundancyPattern, RedundancyPattern)>> {
        match self {
            Self::Uniform { .. } => Ok(None),
            Self::MinRedundancy { gaps_h, gaps_v } => Ok(Some((
                RedundancyPattern::new(gaps_h.clone(), spacing)?,
                RedundancyPattern::new(gaps_v.clone(), spacing)?,
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RisPlacement {
    pub layout: ArrayLayout,
    pub origin: Position,
    pub rotation_rad: f64,
}

impl RisPlacement {
    pub fn reference(layout: ArrayLayout) -> Self {
        Self {
            layout,
            origin: Position::new(1.0, 0.0, 1.0),
            rotation_rad: PI / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub carrier_hz: f64,
    pub bs: ArrayLayout,
    pub ris: Option<RisPlacement>,
    /// Element spacing (or minimum spacing) in wavelengths.
    pub spacing_wavelengths: f64,
    pub dipole_length_wavelengths: f64,
    pub dipole_radius_wavelengths: f64,
    pub receiver_load_ohm: f64,
    pub source_internal_ohm: f64,
}

impl SystemSpec {
    pub fn direct() -> Self {
        Self {
            carrier_hz: CARRIER_HZ,
            bs: ArrayLayout::uniform_bs(),
            ris: None,
            spacing_wavelengths: 0.5,
            dipole_length_wavelengths: 0.5,
            dipole_radius_wavelengths: 1.0 / 500.0,
            receiver_load_ohm: 50.0,
            source_internal_ohm: 50.0,
        }
    }

    /// RIS-assisted system; `min_redundancy` selects the sparse layouts for
    /// both the BS and the RIS.
    pub fn ris(min_redundancy: bool) -> Self {
        let (bs, ris) = if min_redundancy {
            (
                ArrayLayout::min_redundancy_bs(),
                ArrayLayout::min_redundancy_ris(),
            )
        } else {
            (ArrayLayout::uniform_bs(), ArrayLayout::uniform_ris())
        };
        Self {
            bs,
            ris: Some(RisPlacement::reference(ris)),
            ..Self::direct()
        }
    }

    pub fn wavelength(&self) -> f64 {
        wavelength(self.carrier_hz)
    }

    pub fn dipole(&self) -> DipoleDims {
        let l = self.wavelength();
        DipoleDims {
            half_length: self.dipole_length_wavelengths * l / 2.0,
            radius: self.dipole_radius_wavelengths * l,
        }
    }

    fn build_bs(&self) -> Result<ElementLayout> {
        let d = self.spacing_wavelengths * self.wavelength();
        match (&self.bs, self.bs.patterns(d)?) {
            (ArrayLayout::Uniform { nh, nv }, _) => {
                build_uniform_array(*nh, *nv, d, d, self.dipole())
            }
            (_, Some((h, v))) => build_min_redundancy_layout(&h, &v, self.dipole()),
            _ => unreachable!("patterns exist for non-uniform layouts"),
        }
    }

    fn build_ris(&self, placement: &RisPlacement) -> Result<ElementLayout> {
        let d = self.spacing_wavelengths * self.wavelength();
        match (&placement.layout, placement.layout.patterns(d)?) {
            (ArrayLayout::Uniform { nh, nv }, _) => build_ris_layout(
                *nh,
                *nv,
                d,
                d,
                placement.origin,
                placement.rotation_rad,
                self.dipole(),
            ),
            (_, Some((h, v))) => build_min_redundancy_ris(
                &h,
                &v,
                placement.origin,
                placement.rotation_rad,
                self.dipole(),
            ),
            _ => unreachable!("patterns exist for non-uniform layouts"),
        }
    }

    pub fn build(&self) -> Result<EmSystem> {
        if !(self.carrier_hz > 0.0 && self.spacing_wavelengths > 0.0) {
            return Err(Error::invalid(
                "carrier frequency and spacing must be positive",
            ));
        }
        let bs = self.build_bs()?;
        let ris = self.ris.as_ref().map(|p| self.build_ris(p)).transpose()?;
        EmSystem::new(
            bs,
            ris,
            self.wavelength(),
            Complex64::new(self.receiver_load_ohm, 0.0),
            Complex64::new(self.source_internal_ohm, 0.0),
            self.dipole(),
        )
    }
}

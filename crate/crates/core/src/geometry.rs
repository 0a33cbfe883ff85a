//! Element placements for the base-station array, the RIS and the sources.
//!
//! Every element is a thin dipole aligned with the y axis. Planar layouts are
//! described by in-plane offsets `(u, v)`; the BS array lives in the `z = 0`
//! plane with `u` along x, while a RIS is rotated by `phi` in the x–z plane
//! about its origin, so that `x = x_R + cos(phi) u`, `z = z_R + sin(phi) u`
//! and `y = y_R + v`. Element order is row-major: the horizontal index runs
//! fastest.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Position = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleDims {
    pub half_length: f64,
    pub radius: f64,
}

impl DipoleDims {
    /// A dipole of total length `λ/2` and radius `λ/500`.
    pub fn half_wave(wavelength: f64) -> Self {
        Self {
            half_length: wavelength / 4.0,
            radius: wavelength / 500.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.half_length > 0.0 && self.radius > 0.0 && self.radius < self.half_length) {
            return Err(Error::invalid(format!(
                "dipole needs 0 < radius < half_length, got radius {} and half_length {}",
                self.radius, self.half_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dipole {
    pub position: Position,
    pub half_length: f64,
    pub radius: f64,
}

impl Dipole {
    pub fn new(position: Position, dims: DipoleDims) -> Result<Self> {
        dims.validate()?;
        if !position.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("dipole position must be finite"));
        }
        Ok(Self {
            position,
            half_length: dims.half_length,
            radius: dims.radius,
        })
    }

    pub fn dims(&self) -> DipoleDims {
        DipoleDims {
            half_length: self.half_length,
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutKind {
    BsArray,
    Ris,
    Sources,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementLayout {
    pub kind: LayoutKind,
    /// Reference point of the layout: the array centre for the BS, `b0` for a RIS.
    pub origin: Position,
    pub elements: Vec<Dipole>,
}

impl ElementLayout {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Position> + '_ {
        self.elements.iter().map(|e| &e.position)
    }

    /// Smallest distance between two distinct elements (`inf` for fewer than two).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.elements.iter().enumerate() {
            for b in &self.elements[i + 1..] {
                best = best.min((a.position - b.position).norm());
            }
        }
        best
    }

    /// Largest distance between two elements.
    pub fn aperture(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.elements.iter().enumerate() {
            for b in &self.elements[i + 1..] {
                best = best.max((a.position - b.position).norm());
            }
        }
        best
    }

    fn check_distinct(&self) -> Result<()> {
        if self.min_pairwise_distance() <= 0.0 {
            return Err(Error::invalid("two elements share a position"));
        }
        Ok(())
    }
}

/// Gaps between consecutive elements along one axis, in units of `base_spacing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyPattern {
    pub gaps: Vec<u32>,
    pub base_spacing: f64,
}

impl RedundancyPattern {
    pub fn new(gaps: Vec<u32>, base_spacing: f64) -> Result<Self> {
        let p = Self { gaps, base_spacing };
        p.validate()?;
        Ok(p)
    }

    /// Pattern with `n` elements at uniform spacing.
    pub fn uniform(n: usize, spacing: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("uniform pattern needs at least one element"));
        }
        Self::new(vec![1; n - 1], spacing)
    }

    fn validate(&self) -> Result<()> {
        if self.gaps.is_empty() {
            return Err(Error::invalid("redundancy pattern has no gaps"));
        }
        if self.gaps.contains(&0) {
            return Err(Error::invalid("redundancy gaps must be >= 1"));
        }
        if !(self.base_spacing > 0.0 && self.base_spacing.is_finite()) {
            return Err(Error::invalid("base spacing must be positive"));
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.gaps.len() + 1
    }

    /// Grid indices occupied by the elements, starting at 0.
    pub fn grid_offsets(&self) -> Vec<u32> {
        std::iter::once(0)
            .chain(self.gaps.iter().scan(0u32, |acc, &g| {
                *acc += g;
                Some(*acc)
            }))
            .collect()
    }

    /// Number of grid points spanned, first and last included.
    pub fn aperture_grid_points(&self) -> u32 {
        self.gaps.iter().sum::<u32>() + 1
    }

    /// Element coordinates in metres, centred on their mean.
    pub fn centred_coordinates(&self) -> Vec<f64> {
        let offsets = self.grid_offsets();
        let mean = offsets.iter().map(|&o| o as f64).sum::<f64>() / offsets.len() as f64;
        offsets
            .iter()
            .map(|&o| (o as f64 - mean) * self.base_spacing)
            .collect()
    }
}

fn uniform_coordinates(n: usize, spacing: f64) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    (0..n).map(|i| spacing * (i as f64 - half)).collect()
}

fn planar_layout(
    kind: LayoutKind,
    us: &[f64],
    vs: &[f64],
    origin: Position,
    phi: f64,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    let (c, s) = (phi.cos(), phi.sin());
    let mut elements = Vec::with_capacity(us.len() * vs.len());
    for &v in vs {
        for &u in us {
            let pos = origin + Position::new(c * u, v, s * u);
            elements.push(Dipole::new(pos, dims)?);
        }
    }
    let layout = ElementLayout {
        kind,
        origin,
        elements,
    };
    layout.check_distinct()?;
    Ok(layout)
}

fn check_grid(nh: usize, nv: usize, dh: f64, dv: f64) -> Result<()> {
    if nh == 0 || nv == 0 {
        return Err(Error::invalid("element counts must be >= 1"));
    }
    if !(dh > 0.0 && dv > 0.0 && dh.is_finite() && dv.is_finite()) {
        return Err(Error::invalid("element spacings must be positive"));
    }
    Ok(())
}

/// Uniform `nh × nv` planar BS array centred at the origin in the `z = 0` plane.
pub fn build_uniform_array(
    nh: usize,
    nv: usize,
    dh: f64,
    dv: f64,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    check_grid(nh, nv, dh, dv)?;
    planar_layout(
        LayoutKind::BsArray,
        &uniform_coordinates(nh, dh),
        &uniform_coordinates(nv, dv),
        Position::zeros(),
        0.0,
        dims,
    )
}

/// Uniform `nh × nv` RIS centred at `origin` and rotated by `phi` in the x–z plane.
pub fn build_ris_layout(
    nh: usize,
    nv: usize,
    dh: f64,
    dv: f64,
    origin: Position,
    phi: f64,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    check_grid(nh, nv, dh, dv)?;
    if !origin.iter().all(|c| c.is_finite()) || !phi.is_finite() {
        return Err(Error::invalid("RIS origin and rotation must be finite"));
    }
    planar_layout(
        LayoutKind::Ris,
        &uniform_coordinates(nh, dh),
        &uniform_coordinates(nv, dv),
        origin,
        phi,
        dims,
    )
}

/// Non-uniform BS array: the Cartesian product of two minimum-redundancy axes.
pub fn build_min_redundancy_layout(
    pattern_h: &RedundancyPattern,
    pattern_v: &RedundancyPattern,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    build_min_redundancy_in_frame(
        pattern_h,
        pattern_v,
        LayoutKind::BsArray,
        Position::zeros(),
        0.0,
        dims,
    )
}

/// Non-uniform RIS placed like [`build_ris_layout`].
pub fn build_min_redundancy_ris(
    pattern_h: &RedundancyPattern,
    pattern_v: &RedundancyPattern,
    origin: Position,
    phi: f64,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    build_min_redundancy_in_frame(pattern_h, pattern_v, LayoutKind::Ris, origin, phi, dims)
}

fn build_min_redundancy_in_frame(
    pattern_h: &RedundancyPattern,
    pattern_v: &RedundancyPattern,
    kind: LayoutKind,
    origin: Position,
    phi: f64,
    dims: DipoleDims,
) -> Result<ElementLayout> {
    pattern_h.validate()?;
    pattern_v.validate()?;
    planar_layout(
        kind,
        &pattern_h.centred_coordinates(),
        &pattern_v.centred_coordinates(),
        origin,
        phi,
        dims,
    )
}

/// Point sources (single dipoles) at the given positions.
pub fn build_sources(positions: &[Position], dims: DipoleDims) -> Result<ElementLayout> {
    if positions.is_empty() {
        return Err(Error::invalid("at least one source is required"));
    }
    let elements = positions
        .iter()
        .map(|&p| Dipole::new(p, dims))
        .collect::<Result<Vec<_>>>()?;
    let layout = ElementLayout {
        kind: LayoutKind::Sources,
        origin: Position::zeros(),
        elements,
    };
    layout.check_distinct()?;
    Ok(layout)
}

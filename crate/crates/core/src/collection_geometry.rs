//! Collection efficiency of an isotropic point emitter through a stack of
//! rectangular openings (trap aperture, undercut cavity, ...).
//!
//! Every opening seen from the source is an axis-aligned rectangle in the
//! plane of direction tangents `(u, v) = (dx/|dy|, dz/|dy|)`, so the set of
//! directions passing the whole stack is the intersection of those
//! rectangles. The solid angle of a tangent-plane region `A` is
//! `∫∫_A (1 + u² + v²)^(-3/2) du dv`.

use crate::quadrature;
use crate::rng;
use crate::trap_model::{self, IonSpecies, RfDrive, SweepParameter, TrapError, TrapLayout};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Absolute tolerance of the deterministic solid-angle integrator (sr).
pub const QUADRATURE_TOL_SR: f64 = 1e-8;
/// Calibration stops once |efficiency − target| falls below this (fraction of 4π).
pub const CALIBRATION_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CollectionError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("target efficiency {target:.6e} outside achievable bracket [{lo:.6e}, {hi:.6e}]")]
    Calibration { target: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Trap(#[from] TrapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectOpening {
    /// Depth below the electrode plane (µm).
    pub depth: f64,
    pub half_width: f64,
    pub half_length: f64,
    #[serde(default)]
    pub center_x: f64,
    #[serde(default)]
    pub center_z: f64,
}

impl RectOpening {
    pub fn centered(depth: f64, half_width: f64, half_length: f64) -> Self {
        Self {
            depth,
            half_width,
            half_length,
            center_x: 0.0,
            center_z: 0.0,
        }
    }

    /// Bounds of this opening in direction-tangent space for a source at
    /// `height` above the plane and lateral offset `(sx, sz)`.
    pub fn tangent_rect(&self, height: f64, (sx, sz): (f64, f64)) -> TangentRect {
        let d = height + self.depth;
        TangentRect {
            u0: (self.center_x - self.half_width - sx) / d,
            u1: (self.center_x + self.half_width - sx) / d,
            v0: (self.center_z - self.half_length - sz) / d,
            v1: (self.center_z + self.half_length - sz) / d,
        }
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        (x - self.center_x).abs() <= self.half_width
            && (z - self.center_z).abs() <= self.half_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureStack {
    /// Ordered by strictly increasing depth; the first sits at depth 0.
    pub openings: Vec<RectOpening>,
    /// Source height above the electrode plane (µm).
    pub source_height: f64,
    pub substrate_thickness: f64,
}

impl ApertureStack {
    /// Electrode aperture `w × l` at depth 0 and nothing else.
    pub fn single(w: f64, l: f64, source_height: f64) -> Self {
        Self {
            openings: vec![RectOpening::centered(0.0, 0.5 * w, 0.5 * l)],
            source_height,
            substrate_thickness: 275.0,
        }
    }

    pub fn validate(&self) -> Result<(), CollectionError> {
        if !(self.source_height > 0.0) {
            return Err(CollectionError::Domain("source height must be > 0".into()));
        }
        let first = self
            .openings
            .first()
            .ok_or_else(|| CollectionError::Domain("stack has no openings".into()))?;
        if first.depth != 0.0 {
            return Err(CollectionError::Domain(
                "first opening must be the electrode aperture at depth 0".into(),
            ));
        }
        for o in &self.openings {
            if !(o.half_width >= 0.0 && o.half_length >= 0.0 && o.depth >= 0.0) {
                return Err(CollectionError::Domain(format!("invalid opening {o:?}")));
            }
        }
        if self.openings.windows(2).any(|w| w[1].depth <= w[0].depth) {
            return Err(CollectionError::Domain(
                "opening depths must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Intersection of all openings in tangent space; `None` when empty.
    pub fn angular_window(&self, source: (f64, f64)) -> Option<TangentRect> {
        let mut acc = TangentRect {
            u0: f64::NEG_INFINITY,
            u1: f64::INFINITY,
            v0: f64::NEG_INFINITY,
            v1: f64::INFINITY,
        };
        for o in &self.openings {
            let t = o.tangent_rect(self.source_height, source);
            acc.u0 = acc.u0.max(t.u0);
            acc.u1 = acc.u1.min(t.u1);
            acc.v0 = acc.v0.max(t.v0);
            acc.v1 = acc.v1.min(t.v1);
        }
        (acc.u1 > acc.u0 && acc.v1 > acc.v0).then_some(acc)
    }

    /// Whether a downward ray with tangents `(u, v)` from the source passes
    /// every opening.
    pub fn passes(&self, source: (f64, f64), u: f64, v: f64) -> bool {
        self.openings.iter().all(|o| {
            let d = self.source_height + o.depth;
            o.contains(source.0 + u * d, source.1 + v * d)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentRect {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolidAngleResult {
    /// Steradians.
    pub omega: f64,
    /// Fraction of 4π.
    pub efficiency: f64,
    pub stderr: f64,
}

impl SolidAngleResult {
    pub fn from_omega(omega: f64) -> Self {
        Self {
            omega,
            efficiency: omega / (4.0 * PI),
            stderr: 0.0,
        }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.efficiency
    }
}

fn corner_term(u: f64, v: f64) -> f64 {
    (u * v / (1.0 + u * u + v * v).sqrt()).atan()
}

/// Closed-form solid angle of a tangent-plane rectangle.
pub fn tangent_rect_solid_angle(t: &TangentRect) -> f64 {
    corner_term(t.u1, t.v1) - corner_term(t.u0, t.v1) - corner_term(t.u1, t.v0)
        + corner_term(t.u0, t.v0)
}

/// Solid angle of a `w × l` rectangle centred below a source at height `h`.
pub fn solid_angle_onaxis(w: f64, l: f64, h: f64) -> Result<SolidAngleResult, CollectionError> {
    if !(w > 0.0 && l > 0.0 && h > 0.0) {
        return Err(CollectionError::Domain(format!(
            "w, l, h must be > 0 (got {w}, {l}, {h})"
        )));
    }
    let tx = w / (2.0 * h);
    let tz = l / (2.0 * h);
    let omega = 4.0 * (tx * tz / (1.0 + tx * tx + tz * tz).sqrt()).atan();
    Ok(SolidAngleResult::from_omega(omega))
}

fn solid_angle_density(u: f64, v: f64) -> f64 {
    let s = 1.0 + u * u + v * v;
    1.0 / (s * s.sqrt())
}

/// Solid angle through the whole stack by adaptive quadrature over the
/// intersected tangent rectangle.
pub fn solid_angle_stack(
    stack: &ApertureStack,
    source: (f64, f64),
) -> Result<SolidAngleResult, CollectionError> {
    stack.validate()?;
    let Some(t) = stack.angular_window(source) else {
        return Ok(SolidAngleResult::from_omega(0.0));
    };
    let omega = quadrature::integrate_rect(
        solid_angle_density,
        (t.u0, t.u1),
        (t.v0, t.v1),
        QUADRATURE_TOL_SR,
    );
    Ok(SolidAngleResult::from_omega(omega))
}

/// Monte Carlo collection estimate with directions drawn uniformly on the
/// full sphere. Deterministic for a given seed and sample count.
pub fn mc_collection(
    stack: &ApertureStack,
    source: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<SolidAngleResult, CollectionError> {
    stack.validate()?;
    if n_samples < 1000 {
        return Err(CollectionError::Domain(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    let blocks: Vec<_> = rng::blocks(n_samples).collect();
    let hits: u64 = blocks
        .par_iter()
        .map(|&(block, count)| {
            let mut r = rng::substream(seed, block);
            let mut hits = 0u64;
            for _ in 0..count {
                let cos_t: f64 = 2.0 * r.gen::<f64>() - 1.0;
                let phi: f64 = 2.0 * PI * r.gen::<f64>();
                // y component is cos_t; downward rays only
                if cos_t >= 0.0 {
                    continue;
                }
                let sin_t = (1.0 - cos_t * cos_t).sqrt();
                let down = -cos_t;
                let u = sin_t * phi.cos() / down;
                let v = sin_t * phi.sin() / down;
                if stack.passes(source, u, v) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let n = n_samples as f64;
    let p = hits as f64 / n;
    Ok(SolidAngleResult {
        omega: 4.0 * PI * p,
        efficiency: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
    })
}

/// Which undercut dimension(s) the calibration varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Vary the half-width; the length is left unconstrained (aperture shadow).
    HalfWidth,
    /// Vary the half-length; the width is left unconstrained.
    HalfLength,
    /// Scale both with the aperture's aspect ratio.
    FixedAspect,
    /// Grow both half-sizes by the same margin beyond the aperture.
    UniformMargin,
}

struct UndercutFamily {
    aperture: RectOpening,
    depth: f64,
    shadow: f64,
    mode: CalibrationMode,
}

impl UndercutFamily {
    fn range(&self) -> (f64, f64) {
        let a = &self.aperture;
        match self.mode {
            CalibrationMode::HalfWidth => (a.half_width, a.half_width * self.shadow),
            CalibrationMode::HalfLength => (a.half_length, a.half_length * self.shadow),
            CalibrationMode::FixedAspect => (1.0, self.shadow),
            CalibrationMode::UniformMargin => {
                (0.0, (self.shadow - 1.0) * a.half_width.max(a.half_length))
            }
        }
    }

    fn opening(&self, p: f64) -> RectOpening {
        let a = &self.aperture;
        let (hw, hl) = match self.mode {
            CalibrationMode::HalfWidth => (p, a.half_length * self.shadow),
            CalibrationMode::HalfLength => (a.half_width * self.shadow, p),
            CalibrationMode::FixedAspect => (a.half_width * p, a.half_length * p),
            CalibrationMode::UniformMargin => (a.half_width + p, a.half_length + p),
        };
        RectOpening {
            depth: self.depth,
            half_width: hw,
            half_length: hl,
            center_x: a.center_x,
            center_z: a.center_z,
        }
    }
}

fn with_undercut(template: &ApertureStack, undercut: RectOpening) -> ApertureStack {
    ApertureStack {
        openings: vec![template.openings[0], undercut],
        source_height: template.source_height,
        substrate_thickness: template.substrate_thickness,
    }
}

/// Efficiency of the template's electrode aperture on its own plus an
/// undercut opening at the substrate depth.
fn stack_efficiency(
    template: &ApertureStack,
    undercut: RectOpening,
) -> Result<f64, CollectionError> {
    Ok(solid_angle_stack(&with_undercut(template, undercut), (0.0, 0.0))?.efficiency)
}

/// Sizes the undercut opening (at the substrate depth) so that the stack
/// reaches `target` efficiency (fraction of 4π) by bisection.
pub fn calibrate_undercut(
    template: &ApertureStack,
    target: f64,
    mode: CalibrationMode,
) -> Result<RectOpening, CollectionError> {
    template.validate()?;
    let aperture = template.openings[0];
    let depth = template.substrate_thickness;
    if !(depth > 0.0) {
        return Err(CollectionError::Domain(
            "substrate thickness must be > 0".into(),
        ));
    }
    let h = template.source_height;
    let family = UndercutFamily {
        aperture,
        depth,
        shadow: (h + depth) / h,
        mode,
    };
    let (mut lo, mut hi) = family.range();
    let e_lo = stack_efficiency(template, family.opening(lo))?;
    let e_hi = stack_efficiency(template, family.opening(hi))?;
    if (e_lo - target).abs() < CALIBRATION_TOL {
        return Ok(family.opening(lo));
    }
    if (e_hi - target).abs() < CALIBRATION_TOL {
        return Ok(family.opening(hi));
    }
    if target < e_lo || target > e_hi {
        return Err(CollectionError::Calibration {
            target,
            lo: e_lo,
            hi: e_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = stack_efficiency(template, family.opening(mid))?;
        if (e - target).abs() < CALIBRATION_TOL {
            return Ok(family.opening(mid));
        }
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(family.opening(0.5 * (lo + hi)))
}

/// How the calibrated undercut follows the aperture in coupled sweeps.
///
/// Length sweeps keep the calibrated margin beyond the aperture ends; width
/// sweeps (where the ion height is re-solved) keep the undercut clipping the
/// same fraction of the aperture's projected cone on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UndercutModel {
    pub depth: f64,
    pub margin_x: f64,
    pub margin_z: f64,
    pub shadow_fraction_x: f64,
    pub shadow_fraction_z: f64,
}

impl UndercutModel {
    /// Derives the scaling rule from an undercut calibrated against
    /// `aperture` with the source at `height`.
    pub fn from_calibration(aperture: &RectOpening, undercut: &RectOpening, height: f64) -> Self {
        let s = (height + undercut.depth) / height;
        Self {
            depth: undercut.depth,
            margin_x: undercut.half_width - aperture.half_width,
            margin_z: undercut.half_length - aperture.half_length,
            shadow_fraction_x: undercut.half_width / (aperture.half_width * s),
            shadow_fraction_z: undercut.half_length / (aperture.half_length * s),
        }
    }

    pub fn opening(&self, parameter: SweepParameter, w: f64, l: f64, height: f64) -> RectOpening {
        match parameter {
            SweepParameter::ApertureLength => {
                RectOpening::centered(self.depth, 0.5 * w + self.margin_x, 0.5 * l + self.margin_z)
            }
            SweepParameter::ApertureWidth => {
                let s = (height + self.depth) / height;
                RectOpening::centered(
                    self.depth,
                    self.shadow_fraction_x * 0.5 * w * s,
                    self.shadow_fraction_z * 0.5 * l * s,
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectionSweepPoint {
    pub value: f64,
    pub height: f64,
    pub efficiency: f64,
}

pub const COLLECTION_SWEEP_HEADER: &str = "value_um,height_um,efficiency_pct";

/// Inputs shared by coupled trap/optics sweeps.
#[derive(Debug, Clone, Copy)]
pub struct CoupledSweep<'a> {
    pub layout: &'a TrapLayout,
    pub drive: &'a RfDrive,
    pub ion: &'a IonSpecies,
    pub undercut: &'a UndercutModel,
    pub substrate_thickness: f64,
    /// When set, model heights are rescaled so the template layout's null
    /// sits at this height (µm).
    pub design_height: Option<f64>,
}

/// Collection efficiency versus aperture width or length, with the ion height
/// re-solved by the trap model at every point.
pub fn sweep_collection(
    spec: &CoupledSweep<'_>,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<Vec<CollectionSweepPoint>, CollectionError> {
    let trap = trap_model::sweep_trap(spec.layout, spec.drive, spec.ion, parameter, values)?;
    let scale = match spec.design_height {
        Some(target) => target / trap_model::solve_rf_null(spec.layout, spec.drive)?.height,
        None => 1.0,
    };
    trap.par_iter()
        .map(|p| {
            let layout = parameter.apply(spec.layout, p.value);
            let (w, l) = (layout.aperture_width, layout.aperture_length);
            let height = p.height * scale;
            let stack = ApertureStack {
                openings: vec![
                    RectOpening::centered(0.0, 0.5 * w, 0.5 * l),
                    spec.undercut.opening(parameter, w, l, height),
                ],
                source_height: height,
                substrate_thickness: spec.substrate_thickness,
            };
            let eff = solid_angle_stack(&stack, (0.0, 0.0))?.efficiency;
            Ok(CollectionSweepPoint {
                value: p.value,
                height,
                efficiency: eff,
            })
        })
        .collect()
}

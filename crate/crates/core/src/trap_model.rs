//! RF pseudopotential of a surface-electrode trap in the gapless-plane
//! approximation.
//!
//! Coordinates: `x` is the lateral (radial) direction across the rails, `y`
//! the height above the electrode plane and `z` the trap axis. Lengths are in
//! micrometres and potentials in volts throughout; conversions to SI happen
//! only where frequencies are produced.
//!
//! Each electrode is a rectangle held at its amplitude inside an otherwise
//! grounded plane, so its potential above the plane has a closed form (the
//! solid angle subtended by the rectangle, scaled by `amplitude / 2π`). Gaps
//! between electrodes are split evenly between the two neighbours.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602176634e-19;
/// Unified atomic mass unit (kg).
pub const ATOMIC_MASS_UNIT: f64 = 1.66053906660e-27;

/// Central-difference step used for field Jacobians and Hessians (µm).
pub const DIFF_STEP_UM: f64 = 0.05;

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrapError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("rf null solver did not converge after {iterations} iterations (last iterate x = {x:.6} µm, h = {height:.6} µm, |grad| ratio = {ratio:.3e})")]
    NoConvergence {
        iterations: usize,
        x: f64,
        height: f64,
        ratio: f64,
    },
    #[error("no radial confinement: pseudopotential Hessian eigenvalues {0:?}")]
    NoConfinement([f64; 2]),
    #[error("sweep point {value} µm failed: {source}")]
    SweepPoint {
        value: f64,
        #[source]
        source: Box<TrapError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElectrodeRole {
    Rf,
    Ground,
}

/// Axis-aligned electrode rectangle in the trap plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeRect {
    pub x0: f64,
    pub x1: f64,
    pub z0: f64,
    pub z1: f64,
    pub role: ElectrodeRole,
    /// RF amplitude (V); zero for ground electrodes.
    pub amplitude: f64,
}

impl ElectrodeRect {
    pub fn rf(x0: f64, x1: f64, z0: f64, z1: f64, amplitude: f64) -> Self {
        Self {
            x0,
            x1,
            z0,
            z1,
            role: ElectrodeRole::Rf,
            amplitude,
        }
    }

    pub fn ground(x0: f64, x1: f64, z0: f64, z1: f64) -> Self {
        Self {
            x0,
            x1,
            z0,
            z1,
            role: ElectrodeRole::Ground,
            amplitude: 0.0,
        }
    }

    fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.z0 < self.z1
    }

    fn overlaps(&self, other: &Self) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.z0 < other.z1 && other.z0 < self.z1
    }
}

/// Potential (V) and gradient (V/µm) at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub potential: f64,
    pub gradient: [f64; 3],
}

impl FieldSample {
    const ZERO: Self = Self {
        potential: 0.0,
        gradient: [0.0; 3],
    };

    /// Electric field E = -∇φ (V/µm).
    pub fn field(&self) -> [f64; 3] {
        [-self.gradient[0], -self.gradient[1], -self.gradient[2]]
    }

    pub fn field_sq(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum()
    }
}

/// Closed-form potential and gradient of one rectangle held at its amplitude
/// in a grounded plane, evaluated at `p = [x, y, z]` with `y > 0`.
pub fn rect_potential(rect: &ElectrodeRect, p: [f64; 3]) -> Result<FieldSample, TrapError> {
    let [x, y, z] = p;
    if !(y > 0.0) {
        return Err(TrapError::Domain(format!(
            "point must lie above the electrode plane, got height {y}"
        )));
    }
    if rect.amplitude == 0.0 {
        return Ok(FieldSample::ZERO);
    }
    let mut phi = 0.0;
    let mut grad = [0.0; 3];
    let y2 = y * y;
    for (xc, sx) in [(rect.x1, 1.0), (rect.x0, -1.0)] {
        let a = xc - x;
        let a2 = a * a;
        for (zc, sz) in [(rect.z1, 1.0), (rect.z0, -1.0)] {
            let b = zc - z;
            let b2 = b * b;
            let r = (a2 + b2 + y2).sqrt();
            let s = sx * sz;
            phi += s * (a * b / (y * r)).atan();
            // d/da, d/db, d/dy of atan(ab / (y R))
            let d_a = b * y / ((a2 + y2) * r);
            let d_b = a * y / ((b2 + y2) * r);
            let d_y = -a * b * (a2 + b2 + 2.0 * y2) / ((a2 + y2) * (b2 + y2) * r);
            grad[0] -= s * d_a;
            grad[1] += s * d_y;
            grad[2] -= s * d_b;
        }
    }
    let scale = rect.amplitude / (2.0 * PI);
    Ok(FieldSample {
        potential: scale * phi,
        gradient: [scale * grad[0], scale * grad[1], scale * grad[2]],
    })
}

/// Superposed potential of a set of electrodes.
pub fn total_potential(rects: &[ElectrodeRect], p: [f64; 3]) -> Result<FieldSample, TrapError> {
    let mut acc = FieldSample::ZERO;
    for rect in rects {
        let s = rect_potential(rect, p)?;
        acc.potential += s.potential;
        for k in 0..3 {
            acc.gradient[k] += s.gradient[k];
        }
    }
    Ok(acc)
}

/// How the ground electrode grows when an aperture is cut into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroundRule {
    /// ground width = baseline + aperture width
    #[default]
    Additive,
    /// ground width = max(baseline, aperture width + 2·margin)
    Margin,
}

/// Planar five-wire style layout: outer ground | rf | ground with aperture | rf | outer ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapLayout {
    pub rf_width_left: f64,
    pub rf_width_right: f64,
    pub gap: f64,
    pub ground_baseline: f64,
    pub aperture_width: f64,
    pub aperture_length: f64,
    pub ground_margin: f64,
    pub electrode_length: f64,
    pub ground_rule: GroundRule,
}

impl Default for TrapLayout {
    fn default() -> Self {
        Self {
            rf_width_left: 65.0,
            rf_width_right: 80.0,
            gap: 20.0,
            ground_baseline: 65.0,
            aperture_width: 40.0,
            aperture_length: 100.0,
            ground_margin: 12.5,
            electrode_length: 2000.0,
            ground_rule: GroundRule::Additive,
        }
    }
}

impl TrapLayout {
    pub fn validate(&self) -> Result<(), TrapError> {
        let positive = [
            ("rf_width_left", self.rf_width_left),
            ("rf_width_right", self.rf_width_right),
            ("ground_baseline", self.ground_baseline),
            ("electrode_length", self.electrode_length),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrapError::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("gap", self.gap),
            ("aperture_width", self.aperture_width),
            ("aperture_length", self.aperture_length),
            ("ground_margin", self.ground_margin),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrapError::Domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.aperture_length > self.electrode_length {
            return Err(TrapError::Domain(
                "aperture_length exceeds electrode_length".into(),
            ));
        }
        Ok(())
    }

    pub fn ground_width(&self) -> f64 {
        match self.ground_rule {
            GroundRule::Additive => self.ground_baseline + self.aperture_width,
            GroundRule::Margin => self
                .ground_baseline
                .max(self.aperture_width + 2.0 * self.ground_margin),
        }
    }

    /// Same layout with every length multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rf_width_left: self.rf_width_left * s,
            rf_width_right: self.rf_width_right * s,
            gap: self.gap * s,
            ground_baseline: self.ground_baseline * s,
            aperture_width: self.aperture_width * s,
            aperture_length: self.aperture_length * s,
            ground_margin: self.ground_margin * s,
            electrode_length: self.electrode_length * s,
            ground_rule: self.ground_rule,
        }
    }

    /// Gap-collapsed electrode rectangles. The centre ground is centred on
    /// x = 0; the aperture is part of the grounded plane and so contributes no
    /// rectangle of its own.
    pub fn electrodes(&self, drive: &RfDrive) -> Vec<ElectrodeRect> {
        let half_gap = 0.5 * self.gap;
        let g = 0.5 * self.ground_width();
        let (z0, z1) = (-0.5 * self.electrode_length, 0.5 * self.electrode_length);
        let inner_left = -g - half_gap;
        let inner_right = g + half_gap;
        let outer_left = inner_left - self.rf_width_left - self.gap;
        let outer_right = inner_right + self.rf_width_right + self.gap;
        vec![
            ElectrodeRect::rf(outer_left, inner_left, z0, z1, drive.voltage),
            ElectrodeRect::ground(inner_left, inner_right, z0, z1),
            ElectrodeRect::rf(inner_right, outer_right, z0, z1, drive.voltage),
        ]
    }
}

/// Checks that electrode rectangles are well formed and interior-disjoint.
pub fn check_electrodes(rects: &[ElectrodeRect]) -> Result<(), TrapError> {
    for (i, a) in rects.iter().enumerate() {
        if !a.is_valid() {
            return Err(TrapError::Domain(format!("electrode {i} is degenerate")));
        }
        for (j, b) in rects.iter().enumerate().skip(i + 1) {
            if a.overlaps(b) {
                return Err(TrapError::Domain(format!("electrodes {i} and {j} overlap")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfDrive {
    /// Amplitude (V).
    pub voltage: f64,
    /// Drive frequency f = Ω/2π (MHz). Stored as a frequency for config
    /// readability; [`RfDrive::omega`] gives the angular value.
    pub frequency_mhz: f64,
}

impl Default for RfDrive {
    fn default() -> Self {
        Self {
            voltage: 50.0,
            frequency_mhz: 20.0,
        }
    }
}

impl RfDrive {
    /// Angular drive frequency Ω (rad/s).
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_mhz * 1e6
    }

    pub fn validate(&self) -> Result<(), TrapError> {
        if !(self.voltage > 0.0) || !(self.frequency_mhz > 0.0) {
            return Err(TrapError::Domain(
                "rf voltage and frequency must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IonSpecies {
    /// Mass in atomic mass units.
    pub mass_amu: f64,
    /// Charge in elementary charges.
    pub charge: u32,
}

impl Default for IonSpecies {
    /// ⁴⁰Ca⁺
    fn default() -> Self {
        Self {
            mass_amu: 39.9626,
            charge: 1,
        }
    }
}

impl IonSpecies {
    pub fn mass_kg(&self) -> f64 {
        self.mass_amu * ATOMIC_MASS_UNIT
    }

    pub fn charge_c(&self) -> f64 {
        self.charge as f64 * ELEMENTARY_CHARGE
    }

    pub fn validate(&self) -> Result<(), TrapError> {
        if !(self.mass_amu > 0.0) || self.charge < 1 {
            return Err(TrapError::Domain(
                "ion mass must be > 0 and charge >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSolution {
    /// Lateral null position (µm).
    pub null_x: f64,
    /// Null height above the electrode plane (µm).
    pub height: f64,
    /// Radial secular frequencies (MHz); zero until [`radial_frequencies`] fills them.
    pub omega_x: f64,
    pub omega_y: f64,
    /// Pseudopotential Hessian in the radial (x, y) plane (J/m²).
    pub hessian: [[f64; 2]; 2],
    pub iterations: usize,
}

fn field_xy(rects: &[ElectrodeRect], x: f64, y: f64) -> Result<Vector2<f64>, TrapError> {
    let s = total_potential(rects, [x, y, 0.0])?;
    Ok(Vector2::new(-s.gradient[0], -s.gradient[1]))
}

fn field_sq(rects: &[ElectrodeRect], x: f64, y: f64) -> Result<f64, TrapError> {
    Ok(total_potential(rects, [x, y, 0.0])?.field_sq())
}

/// Jacobian of (Ex, Ey) with respect to (x, y) by central differences.
fn field_jacobian(rects: &[ElectrodeRect], x: f64, y: f64) -> Result<Matrix2<f64>, TrapError> {
    let h = DIFF_STEP_UM;
    let dx = (field_xy(rects, x + h, y)? - field_xy(rects, x - h, y)?) / (2.0 * h);
    let dy = (field_xy(rects, x, y + h)? - field_xy(rects, x, y - h)?) / (2.0 * h);
    Ok(Matrix2::from_columns(&[dx, dy]))
}

/// Locates the minimum of |E|² along x = 0 with a coarse scan; used as the
/// Newton starting point.
fn initial_guess(rects: &[ElectrodeRect]) -> Result<(f64, f64), TrapError> {
    let span = rects
        .iter()
        .map(|r| r.x0.abs().max(r.x1.abs()))
        .fold(0.0_f64, f64::max);
    let n = 400;
    let mut best = (f64::INFINITY, span * 0.5);
    for i in 1..=n {
        let y = 2.0 * span * i as f64 / n as f64;
        let f = field_sq(rects, 0.0, y)?;
        if f < best.0 {
            best = (f, y);
        }
    }
    Ok((0.0, best.1))
}

/// Newton iteration for the rf null in the transverse plane at the axial
/// centre. Iterates until the gradient of |E|² drops below 1e-10 of its
/// starting value, halving the step whenever |E|² fails to decrease.
pub fn solve_rf_null_rects(rects: &[ElectrodeRect]) -> Result<TrapSolution, TrapError> {
    let (mut x, mut y) = initial_guess(rects)?;
    type Linearized = (Vector2<f64>, Matrix2<f64>, Vector2<f64>);
    let grad_of = |x: f64, y: f64| -> Result<Linearized, TrapError> {
        let e = field_xy(rects, x, y)?;
        let j = field_jacobian(rects, x, y)?;
        Ok((2.0 * j.transpose() * e, j, e))
    };
    let (g0, mut jac, mut e) = grad_of(x, y)?;
    let g0_norm = g0.norm();
    if g0_norm == 0.0 {
        return Ok(TrapSolution {
            null_x: x,
            height: y,
            omega_x: 0.0,
            omega_y: 0.0,
            hessian: [[0.0; 2]; 2],
            iterations: 0,
        });
    }
    let mut ratio = 1.0;
    for it in 1..=NEWTON_MAX_ITER {
        let step = jac
            .try_inverse()
            .map(|inv| -(inv * e))
            .ok_or(TrapError::NoConvergence {
                iterations: it,
                x,
                height: y,
                ratio,
            })?;
        let f_old = e.norm_squared();
        let mut damping = 1.0;
        let (mut nx, mut ny);
        loop {
            nx = x + damping * step[0];
            ny = y + damping * step[1];
            if ny > 0.0 && field_sq(rects, nx, ny)? <= f_old {
                break;
            }
            damping *= 0.5;
            if damping < 1e-8 {
                break;
            }
        }
        x = nx;
        y = ny.max(f64::MIN_POSITIVE);
        let (g, j, en) = grad_of(x, y)?;
        jac = j;
        e = en;
        ratio = g.norm() / g0_norm;
        if ratio < NEWTON_REL_TOL {
            return Ok(TrapSolution {
                null_x: x,
                height: y,
                omega_x: 0.0,
                omega_y: 0.0,
                hessian: [[0.0; 2]; 2],
                iterations: it,
            });
        }
    }
    Err(TrapError::NoConvergence {
        iterations: NEWTON_MAX_ITER,
        x,
        height: y,
        ratio,
    })
}

pub fn solve_rf_null(layout: &TrapLayout, drive: &RfDrive) -> Result<TrapSolution, TrapError> {
    layout.validate()?;
    drive.validate()?;
    let rects = layout.electrodes(drive);
    check_electrodes(&rects)?;
    solve_rf_null_rects(&rects)
}

/// Hessian of |E|² (V²/µm⁴) at (x, y) by central differences of |E|².
pub fn field_sq_hessian(
    rects: &[ElectrodeRect],
    x: f64,
    y: f64,
) -> Result<Matrix2<f64>, TrapError> {
    let h = DIFF_STEP_UM;
    let f = |a: f64, b: f64| field_sq(rects, a, b);
    let f0 = f(x, y)?;
    let hxx = (f(x + h, y)? - 2.0 * f0 + f(x - h, y)?) / (h * h);
    let hyy = (f(x, y + h)? - 2.0 * f0 + f(x, y - h)?) / (h * h);
    let hxy =
        (f(x + h, y + h)? - f(x + h, y - h)? - f(x - h, y + h)? + f(x - h, y - h)?) / (4.0 * h * h);
    Ok(Matrix2::new(hxx, hxy, hxy, hyy))
}

/// Radial secular frequencies from the pseudopotential
/// Ψ = q²|E|²/(4 m Ω²) at the rf null.
pub fn radial_frequencies(
    layout: &TrapLayout,
    drive: &RfDrive,
    ion: &IonSpecies,
) -> Result<TrapSolution, TrapError> {
    ion.validate()?;
    let mut sol = solve_rf_null(layout, drive)?;
    let rects = layout.electrodes(drive);
    frequencies_at(&rects, drive, ion, &mut sol)?;
    Ok(sol)
}

fn frequencies_at(
    rects: &[ElectrodeRect],
    drive: &RfDrive,
    ion: &IonSpecies,
    sol: &mut TrapSolution,
) -> Result<(), TrapError> {
    // V²/µm⁴ -> V²/m⁴
    let h_e2 = field_sq_hessian(rects, sol.null_x, sol.height)? * 1e24;
    let q = ion.charge_c();
    let m = ion.mass_kg();
    let omega_rf = drive.omega();
    let h_psi = h_e2 * (q * q / (4.0 * m * omega_rf * omega_rf));
    let eig = SymmetricEigen::new(h_psi);
    let vals = [eig.eigenvalues[0], eig.eigenvalues[1]];
    if vals.iter().any(|&v| !(v > 0.0)) {
        return Err(TrapError::NoConfinement(vals));
    }
    // The eigenvector with the larger x component is the x mode.
    let (ix, iy) = if eig.eigenvectors[(0, 0)].abs() >= eig.eigenvectors[(0, 1)].abs() {
        (0, 1)
    } else {
        (1, 0)
    };
    let to_mhz = |k: f64| (k / m).sqrt() / (2.0 * PI * 1e6);
    sol.omega_x = to_mhz(vals[ix]);
    sol.omega_y = to_mhz(vals[iy]);
    sol.hessian = [
        [h_psi[(0, 0)], h_psi[(0, 1)]],
        [h_psi[(1, 0)], h_psi[(1, 1)]],
    ];
    Ok(())
}

/// Geometry parameter varied in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    ApertureWidth,
    ApertureLength,
}

impl SweepParameter {
    pub fn apply(&self, layout: &TrapLayout, value: f64) -> TrapLayout {
        let mut l = *layout;
        match self {
            SweepParameter::ApertureWidth => l.aperture_width = value,
            SweepParameter::ApertureLength => l.aperture_length = value,
        }
        l
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::ApertureWidth => "aperture_width",
            SweepParameter::ApertureLength => "aperture_length",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSweepPoint {
    pub value: f64,
    pub height: f64,
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_y_norm: f64,
}

pub const TRAP_SWEEP_HEADER: &str = "value_um,height_um,omega_x_MHz,omega_y_MHz,omega_y_norm";

pub(crate) fn check_increasing(values: &[f64]) -> Result<(), String> {
    if values.is_empty() {
        return Err("sweep values are empty".into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("sweep values must be finite".into());
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err("sweep values must be strictly increasing".into());
    }
    Ok(())
}

/// One trap solution per value; ω_y is normalised by the same layout with no
/// aperture (w = 0). Points are evaluated in parallel and returned in input
/// order.
pub fn sweep_trap(
    template: &TrapLayout,
    drive: &RfDrive,
    ion: &IonSpecies,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<Vec<TrapSweepPoint>, TrapError> {
    check_increasing(values).map_err(TrapError::Domain)?;
    let mut reference = *template;
    reference.aperture_width = 0.0;
    let reference = radial_frequencies(&reference, drive, ion)?;
    values
        .par_iter()
        .map(|&value| {
            let layout = parameter.apply(template, value);
            radial_frequencies(&layout, drive, ion)
                .map(|s| TrapSweepPoint {
                    value,
                    height: s.height,
                    omega_x: s.omega_x,
                    omega_y: s.omega_y,
                    omega_y_norm: s.omega_y / reference.omega_y,
                })
                .map_err(|e| TrapError::SweepPoint {
                    value,
                    source: Box::new(e),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_rect() -> ElectrodeRect {
        ElectrodeRect::rf(-10.0, 10.0, -20.0, 20.0, 1.0)
    }

    #[test]
    fn boundary_values() {
        let r = unit_rect();
        let inside = rect_potential(&r, [0.0, 1e-6, 0.0]).unwrap();
        assert_relative_eq!(inside.potential, 1.0, epsilon = 1e-6);
        let outside = rect_potential(&r, [200.0, 1e-6, 0.0]).unwrap();
        assert!(outside.potential.abs() < 1e-9);
    }

    #[test]
    fn mirror_symmetry() {
        let r = unit_rect();
        let a = rect_potential(&r, [3.7, 12.0, 4.1]).unwrap();
        let b = rect_potential(&r, [-3.7, 12.0, 4.1]).unwrap();
        assert_relative_eq!(a.potential, b.potential, epsilon = 1e-15);
        assert_relative_eq!(a.gradient[0], -b.gradient[0], epsilon = 1e-15);
    }

    #[test]
    fn rejects_points_on_plane() {
        assert!(matches!(
            rect_potential(&unit_rect(), [0.0, 0.0, 0.0]),
            Err(TrapError::Domain(_))
        ));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let r = ElectrodeRect::rf(-30.0, 45.0, -500.0, 400.0, 7.0);
        let p = [12.0, 37.0, -15.0];
        let g = rect_potential(&r, p).unwrap().gradient;
        let h = 1e-4;
        for k in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[k] += h;
            lo[k] -= h;
            let fd = (rect_potential(&r, hi).unwrap().potential
                - rect_potential(&r, lo).unwrap().potential)
                / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn symmetric_layout_null_on_axis() {
        let layout = TrapLayout {
            rf_width_left: 65.0,
            rf_width_right: 65.0,
            ..TrapLayout::default()
        };
        let sol = solve_rf_null(&layout, &RfDrive::default()).unwrap();
        assert!(sol.null_x.abs() < 1e-9, "null_x = {}", sol.null_x);
    }

    #[test]
    fn ground_rules() {
        let mut l = TrapLayout::default();
        assert_eq!(l.ground_width(), 105.0);
        l.ground_rule = GroundRule::Margin;
        assert_eq!(l.ground_width(), 65.0);
        l.aperture_width = 100.0;
        assert_eq!(l.ground_width(), 125.0);
    }

    #[test]
    fn electrodes_are_disjoint() {
        let l = TrapLayout::default();
        let rects = l.electrodes(&RfDrive::default());
        check_electrodes(&rects).unwrap();
        let bad = [unit_rect(), ElectrodeRect::ground(5.0, 30.0, 0.0, 1.0)];
        assert!(check_electrodes(&bad).is_err());
    }

    #[test]
    fn frequency_scaling_is_exact() {
        let layout = TrapLayout::default();
        let ion = IonSpecies::default();
        let base = radial_frequencies(&layout, &RfDrive::default(), &ion).unwrap();
        let v2 = RfDrive {
            voltage: 100.0,
            ..RfDrive::default()
        };
        let f2 = RfDrive {
            frequency_mhz: 40.0,
            ..RfDrive::default()
        };
        let a = radial_frequencies(&layout, &v2, &ion).unwrap();
        let b = radial_frequencies(&layout, &f2, &ion).unwrap();
        assert_relative_eq!(a.omega_x, 2.0 * base.omega_x, max_relative = 1e-9);
        assert_relative_eq!(a.omega_y, 2.0 * base.omega_y, max_relative = 1e-9);
        assert_relative_eq!(b.omega_x, 0.5 * base.omega_x, max_relative = 1e-9);
        assert_relative_eq!(b.omega_y, 0.5 * base.omega_y, max_relative = 1e-9);
        let heavy = IonSpecies {
            mass_amu: 4.0 * ion.mass_amu,
            ..ion
        };
        // Ψ already carries 1/m and ω² = Ψ''/m, so ω ∝ 1/m
        let c = radial_frequencies(&layout, &RfDrive::default(), &heavy).unwrap();
        assert_relative_eq!(c.omega_y, 0.25 * base.omega_y, max_relative = 1e-9);
    }

    #[test]
    fn zero_width_normalises_to_one() {
        let pts = sweep_trap(
            &TrapLayout::default(),
            &RfDrive::default(),
            &IonSpecies::default(),
            SweepParameter::ApertureWidth,
            &[0.0, 40.0],
        )
        .unwrap();
        assert_relative_eq!(pts[0].omega_y_norm, 1.0, epsilon = 1e-12);
        assert!(pts[1].omega_y_norm < 1.0);
    }

    #[test]
    fn sweep_rejects_unsorted_values() {
        let r = sweep_trap(
            &TrapLayout::default(),
            &RfDrive::default(),
            &IonSpecies::default(),
            SweepParameter::ApertureWidth,
            &[40.0, 20.0],
        );
        assert!(matches!(r, Err(TrapError::Domain(_))));
    }

    #[test]
    fn invalid_layout_rejected() {
        let l = TrapLayout {
            rf_width_left: -1.0,
            ..TrapLayout::default()
        };
        assert!(solve_rf_null(&l, &RfDrive::default()).is_err());
    }
}

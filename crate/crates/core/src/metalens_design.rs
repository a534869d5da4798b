//! Collimation phase for the backside metalens and its nanopillar realisation.
//!
//! The emitter sits on axis at the top of a stack of planar layers and the
//! lens at the bottom. For every lens radius the stationary optical path is
//! found from the ray invariant `p = n sin θ` (constant across planar
//! interfaces): the ray reaching radius `r` satisfies
//! `r = Σ tᵢ p / √(nᵢ² − p²)` and has optical path `Σ tᵢ nᵢ² / √(nᵢ² − p²)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use thiserror::Error;

/// Refractive index of the borosilicate carrier at 397 nm.
pub const GLASS_INDEX_397: f64 = 1.5262;

#[derive(Debug, Error)]
pub enum LensError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("compile error: {0}")]
    Compile(String),
    #[error("lookup error: no library entry for diameter {0} nm")]
    Lookup(f64),
    #[error("library format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub name: String,
    /// µm
    pub thickness: f64,
    pub index: f64,
}

impl Layer {
    pub fn new(name: &str, thickness: f64, index: f64) -> Self {
        Self {
            name: name.to_owned(),
            thickness,
            index,
        }
    }
}

/// Layers ordered from the emitter towards the lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl Default for LayerStack {
    fn default() -> Self {
        Self {
            layers: vec![
                Layer::new("ion_to_surface", 125.0, 1.0),
                Layer::new("substrate_hole", 275.0, 1.0),
                Layer::new("glass", 200.0, GLASS_INDEX_397),
            ],
        }
    }
}

impl LayerStack {
    pub fn validate(&self) -> Result<(), LensError> {
        if self.layers.is_empty() {
            return Err(LensError::Domain("layer stack is empty".into()));
        }
        for l in &self.layers {
            if !(l.thickness > 0.0) || !(l.index >= 1.0) {
                return Err(LensError::Domain(format!(
                    "layer `{}` needs thickness > 0 and index >= 1",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn total_thickness(&self) -> f64 {
        self.layers.iter().map(|l| l.thickness).sum()
    }

    /// Σ t/n: the paraxial (reduced) distance from emitter to lens.
    pub fn reduced_thickness(&self) -> f64 {
        self.layers.iter().map(|l| l.thickness / l.index).sum()
    }

    fn min_index(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.index)
            .fold(f64::INFINITY, f64::min)
    }

    /// Lateral reach and optical path for invariant `p`.
    fn trace(&self, p: f64) -> (f64, f64, f64) {
        let mut r = 0.0;
        let mut dr = 0.0;
        let mut opl = 0.0;
        for l in &self.layers {
            let c = (l.index * l.index - p * p).sqrt();
            r += l.thickness * p / c;
            dr += l.thickness * l.index * l.index / (c * c * c);
            opl += l.thickness * l.index * l.index / c;
        }
        (r, dr, opl)
    }

    /// Optical path (µm) of the stationary ray from the emitter to lens radius `r`.
    pub fn optical_path(&self, r: f64) -> Result<f64, LensError> {
        if r == 0.0 {
            return Ok(self.layers.iter().map(|l| l.thickness * l.index).sum());
        }
        let p_max = self.min_index();
        let (mut lo, mut hi) = (0.0_f64, p_max);
        // Newton on p with a bisection safeguard; r(p) is increasing and
        // diverges as p → min index, so a root always exists.
        let mut p = (r / self.total_thickness()).min(0.5) * p_max;
        for _ in 0..200 {
            let (rp, drp, opl) = self.trace(p);
            let err = rp - r;
            if err.abs() <= 1e-12 * r.max(1.0) {
                return Ok(opl);
            }
            if err < 0.0 {
                lo = p;
            } else {
                hi = p;
            }
            let next = p - err / drp;
            p = if next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < f64::EPSILON * p_max {
                return Ok(self.trace(p).2);
            }
        }
        Err(LensError::Domain(format!(
            "no stationary ray reaches lens radius {r} µm"
        )))
    }
}

/// Target phase sampled on a uniform radial grid plus its even-power fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub wavelength_nm: f64,
    pub lens_diameter_um: f64,
    /// Radial sample spacing (µm); sample i sits at r = i·dr.
    pub dr: f64,
    /// Phase (rad), zero on axis.
    pub phase: Vec<f64>,
    /// Coefficients of ρ², ρ⁴, … with ρ = r / lens radius; empty until fitted.
    pub zernike_coeffs: Vec<f64>,
}

impl PhaseProfile {
    pub fn radius(&self) -> f64 {
        0.5 * self.lens_diameter_um
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.phase.len()).map(move |i| i as f64 * self.dr)
    }

    /// Linearly interpolated phase; `None` outside the lens.
    pub fn phase_at(&self, r: f64) -> Option<f64> {
        if r > self.radius() || self.phase.is_empty() {
            return None;
        }
        let t = r / self.dr;
        let i = (t.floor() as usize).min(self.phase.len() - 1);
        if i + 1 >= self.phase.len() {
            return Some(self.phase[self.phase.len() - 1]);
        }
        let f = t - i as f64;
        Some(self.phase[i] * (1.0 - f) + self.phase[i + 1] * f)
    }

    /// Evaluates the fitted polynomial.
    pub fn fitted_phase(&self, r: f64) -> f64 {
        let rho2 = (r / self.radius()).powi(2);
        let mut acc = 0.0;
        let mut pw = rho2;
        for c in &self.zernike_coeffs {
            acc += c * pw;
            pw *= rho2;
        }
        acc
    }
}

/// Collimating phase φ(r) = (2π/λ)(OPL(0) − OPL(r)) for a lens at the bottom
/// of `stack`, sampled at `samples` radii from 0 to the lens edge.
pub fn collimation_phase(
    stack: &LayerStack,
    lens_diameter_um: f64,
    wavelength_nm: f64,
    samples: usize,
) -> Result<PhaseProfile, LensError> {
    stack.validate()?;
    if !(lens_diameter_um > 0.0) || !(wavelength_nm > 0.0) || samples < 2 {
        return Err(LensError::Domain(
            "lens diameter and wavelength must be > 0 and samples >= 2".into(),
        ));
    }
    let k0 = TAU / (wavelength_nm * 1e-3);
    let radius = 0.5 * lens_diameter_um;
    let dr = radius / (samples - 1) as f64;
    let opl0 = stack.optical_path(0.0)?;
    let phase = (0..samples)
        .into_par_iter()
        .map(|i| Ok(k0 * (opl0 - stack.optical_path(i as f64 * dr)?)))
        .collect::<Result<Vec<_>, LensError>>()?;
    Ok(PhaseProfile {
        wavelength_nm,
        lens_diameter_um,
        dr,
        phase,
        zernike_coeffs: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvenFit {
    /// Coefficients of ρ^(2k), k = 1..K, with ρ normalised to the lens radius.
    pub coefficients: Vec<f64>,
    pub max_residual: f64,
}

impl EvenFit {
    /// Coefficient of r^(2k) in physical units (rad/µm^(2k)).
    pub fn coefficient_um(&self, k: usize, radius: f64) -> f64 {
        self.coefficients[k - 1] / radius.powi(2 * k as i32)
    }
}

/// Least-squares fit of the sampled phase to Σ c_k ρ^(2k), k = 1..K.
pub fn fit_even_zernike(profile: &PhaseProfile, order: usize) -> Result<EvenFit, LensError> {
    if order < 2 {
        return Err(LensError::Fit(format!("order must be >= 2, got {order}")));
    }
    let n = profile.phase.len();
    if n < order {
        return Err(LensError::Fit(format!(
            "{n} samples cannot determine {order} coefficients"
        )));
    }
    let radius = profile.radius();
    let a = DMatrix::from_fn(n, order, |i, k| {
        let rho = i as f64 * profile.dr / radius;
        rho.powi(2 * (k as i32 + 1))
    });
    let b = DVector::from_column_slice(&profile.phase);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax) {
        return Err(LensError::Fit(format!(
            "rank-deficient design matrix (condition {:.3e})",
            smax / smin
        )));
    }
    let c = svd
        .solve(&b, 0.0)
        .map_err(|e| LensError::Fit(e.to_string()))?;
    let resid = &a * &c - b;
    Ok(EvenFit {
        coefficients: c.iter().copied().collect(),
        max_residual: resid.amax(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PillarEntry {
    pub diameter_nm: f64,
    pub phase_rad: f64,
    /// Power transmittance.
    pub transmittance: f64,
}

/// Phase delay and transmittance versus pillar diameter at a fixed period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PillarLibrary {
    pub period_nm: f64,
    /// Sorted by diameter.
    pub entries: Vec<PillarEntry>,
}

impl PillarLibrary {
    /// Smooth monotone stand-in library (NOT from an electromagnetic
    /// simulation): 64 diameters from 70 to 220 nm, phase 0 → 2.2π,
    /// transmittance 0.97 → 0.85, period 250 nm.
    pub fn synthetic() -> Self {
        let n = 64;
        let entries = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                PillarEntry {
                    diameter_nm: 70.0 + 150.0 * s,
                    phase_rad: 2.2 * PI * (0.6 * s + 0.4 * s * s),
                    transmittance: 0.97 - 0.12 * s,
                }
            })
            .collect();
        Self {
            period_nm: 250.0,
            entries,
        }
    }

    pub fn from_csv<R: Read>(reader: R, period_nm: f64) -> Result<Self, LensError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["diameter_nm", "phase_rad", "transmittance"] {
            return Err(LensError::Format(format!(
                "expected header diameter_nm,phase_rad,transmittance, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries: Vec<PillarEntry> = rdr.deserialize().collect::<Result<_, csv::Error>>()?;
        entries.sort_by(|a, b| a.diameter_nm.total_cmp(&b.diameter_nm));
        let lib = Self { period_nm, entries };
        lib.validate()?;
        Ok(lib)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LensError> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LensError> {
        if self.entries.is_empty() {
            return Err(LensError::Format("library is empty".into()));
        }
        if !(self.period_nm > 0.0) {
            return Err(LensError::Format("period must be > 0".into()));
        }
        if self
            .entries
            .iter()
            .any(|e| !(e.diameter_nm > 0.0) || !(0.0..=1.0).contains(&e.transmittance))
        {
            return Err(LensError::Format(
                "diameters must be > 0 and transmittance in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn phase_span(&self) -> f64 {
        let (lo, hi) = self
            .entries
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.phase_rad), hi.max(e.phase_rad))
            });
        hi - lo
    }

    /// Largest gap between neighbouring library phases on the 2π circle.
    pub fn quantization_step(&self) -> f64 {
        let mut p: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.phase_rad.rem_euclid(TAU))
            .collect();
        p.sort_by(f64::total_cmp);
        let mut gap = TAU - p[p.len() - 1] + p[0];
        for w in p.windows(2) {
            gap = gap.max(w[1] - w[0]);
        }
        gap
    }

    /// Entry whose phase is nearest `target` on the 2π circle; ties go to
    /// the smaller diameter.
    pub fn nearest(&self, target: f64) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = wrapped_diff(target, e.phase_rad);
            if d.abs() < best.1.abs() {
                best = (i, d);
            }
        }
        best
    }

    pub fn lookup(&self, diameter_nm: f64) -> Result<&PillarEntry, LensError> {
        self.entries
            .iter()
            .find(|e| (e.diameter_nm - diameter_nm).abs() <= 1e-6)
            .ok_or(LensError::Lookup(diameter_nm))
    }
}

/// `a − b` wrapped into [−π, π).
pub fn wrapped_diff(a: f64, b: f64) -> f64 {
    (a - b + PI).rem_euclid(TAU) - PI
}

/// Square lattice of pillar diameters centred on the lens axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub period_nm: f64,
    /// Sites per side (odd, so the centre is a site).
    pub n: usize,
    /// Row-major `[ix * n + iz]`; `None` outside the lens aperture.
    pub diameters: Vec<Option<f64>>,
    /// Target minus realised phase (wrapped), NaN outside the aperture.
    pub residual: Vec<f64>,
}

pub const FEATURE_MAP_HEADER: &str = "ix,iz,x_nm,z_nm,diameter_nm";

impl FeatureMap {
    fn center(&self) -> f64 {
        ((self.n - 1) / 2) as f64
    }

    pub fn site_position_nm(&self, ix: usize, iz: usize) -> (f64, f64) {
        let c = self.center();
        (
            (ix as f64 - c) * self.period_nm,
            (iz as f64 - c) * self.period_nm,
        )
    }

    pub fn mean_abs_residual(&self) -> f64 {
        let (sum, count) = self
            .residual
            .iter()
            .filter(|r| r.is_finite())
            .fold((0.0, 0usize), |(s, c), r| (s + r.abs(), c + 1));
        sum / count.max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{FEATURE_MAP_HEADER}")?;
        for ix in 0..self.n {
            for iz in 0..self.n {
                if let Some(d) = self.diameters[ix * self.n + iz] {
                    let (x, z) = self.site_position_nm(ix, iz);
                    writeln!(w, "{ix},{iz},{x},{z},{d}")?;
                }
            }
        }
        Ok(())
    }
}

/// Compiles the target phase onto the pillar lattice: at each site inside the
/// aperture the wrapped target is matched to the nearest library phase.
pub fn phase_to_featuremap(
    profile: &PhaseProfile,
    library: &PillarLibrary,
) -> Result<FeatureMap, LensError> {
    library.validate()?;
    if library.phase_span() < TAU {
        return Err(LensError::Compile(format!(
            "library spans {:.4} rad, less than 2π",
            library.phase_span()
        )));
    }
    let period_um = library.period_nm * 1e-3;
    let radius = profile.radius();
    let half = (radius / period_um).floor() as usize;
    let n = 2 * half + 1;
    let c = half as f64;
    let rows: Vec<(Vec<Option<f64>>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ix| {
            let x = (ix as f64 - c) * period_um;
            let mut d = Vec::with_capacity(n);
            let mut res = Vec::with_capacity(n);
            for iz in 0..n {
                let z = (iz as f64 - c) * period_um;
                match profile.phase_at(x.hypot(z)) {
                    Some(target) => {
                        let wrapped = target.rem_euclid(TAU);
                        let (i, diff) = library.nearest(wrapped);
                        d.push(Some(library.entries[i].diameter_nm));
                        res.push(diff);
                    }
                    None => {
                        d.push(None);
                        res.push(f64::NAN);
                    }
                }
            }
            (d, res)
        })
        .collect();
    let mut diameters = Vec::with_capacity(n * n);
    let mut residual = Vec::with_capacity(n * n);
    for (d, r) in rows {
        diameters.extend(d);
        residual.extend(r);
    }
    Ok(FeatureMap {
        period_nm: library.period_nm,
        n,
        diameters,
        residual,
    })
}

/// Per-site realised phase and transmittance of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLens {
    pub period_nm: f64,
    pub n: usize,
    /// Wrapped phase per site, NaN outside the aperture.
    pub phase: Vec<f64>,
    /// Power transmittance per site, 0 outside the aperture.
    pub transmittance: Vec<f64>,
}

impl CompiledLens {
    /// Nearest-site lookup at a physical position (µm).
    pub fn sample(&self, x_um: f64, z_um: f64) -> Option<(f64, f64)> {
        let p = self.period_nm * 1e-3;
        let c = ((self.n - 1) / 2) as f64;
        let ix = (x_um / p + c).round();
        let iz = (z_um / p + c).round();
        if ix < 0.0 || iz < 0.0 || ix >= self.n as f64 || iz >= self.n as f64 {
            return None;
        }
        let k = ix as usize * self.n + iz as usize;
        let ph = self.phase[k];
        ph.is_finite().then(|| (ph, self.transmittance[k]))
    }

    /// Phase and amplitude (√T) on an `n × n` grid of spacing `dx` centred on
    /// the lens axis, by nearest-site assignment.
    pub fn resample(&self, n: usize, dx: f64) -> (Vec<f64>, Vec<f64>) {
        let c = (n / 2) as f64;
        let mut phase = vec![0.0; n * n];
        let mut amp = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if let Some((p, t)) = self.sample((i as f64 - c) * dx, (j as f64 - c) * dx) {
                    phase[i * n + j] = p;
                    amp[i * n + j] = t.sqrt();
                }
            }
        }
        (phase, amp)
    }

    /// Mean power transmittance over the occupied sites.
    pub fn mean_transmittance(&self) -> f64 {
        let (s, c) = self
            .phase
            .iter()
            .zip(&self.transmittance)
            .filter(|(p, _)| p.is_finite())
            .fold((0.0, 0usize), |(s, c), (_, t)| (s + t, c + 1));
        s / c.max(1) as f64
    }
}

/// Looks up every site's diameter in the library.
pub fn featuremap_phase(
    map: &FeatureMap,
    library: &PillarLibrary,
) -> Result<CompiledLens, LensError> {
    let mut phase = Vec::with_capacity(map.diameters.len());
    let mut transmittance = Vec::with_capacity(map.diameters.len());
    for d in &map.diameters {
        match d {
            Some(d) => {
                let e = library.lookup(*d)?;
                phase.push(e.phase_rad.rem_euclid(TAU));
                transmittance.push(e.transmittance);
            }
            None => {
                phase.push(f64::NAN);
                transmittance.push(0.0);
            }
        }
    }
    Ok(CompiledLens {
        period_nm: map.period_nm,
        n: map.n,
        phase,
        transmittance,
    })
}

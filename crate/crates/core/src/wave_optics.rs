//! Scalar angular-spectrum simulation of the focal spot formed by the
//! backside metalens through the substrate hole and trap aperture, plus the
//! normal-incidence transmittance budget.

use crate::collection_geometry::{ApertureStack, RectOpening};
use crate::metalens_design::{CompiledLens, LayerStack, PhaseProfile};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Relative power tolerance for a single transfer-function step.
pub const POWER_TOL: f64 = 1e-6;
/// Fraction of the field energy allowed within two samples of the border.
pub const ALIAS_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(
        "propagation error: {fraction:.3e} of the field energy sits at the grid border; use a larger grid"
    )]
    Aliasing { fraction: f64 },
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Square sampled field; `data[ix * n + iz]` sits at
/// `((ix − n/2)·dx, (iz − n/2)·dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField2D {
    pub n: usize,
    /// µm
    pub dx: f64,
    pub data: Vec<Complex64>,
}

impl ComplexField2D {
    pub fn zeros(n: usize, dx: f64) -> Self {
        Self {
            n,
            dx,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn from_fn<F>(n: usize, dx: f64, f: F) -> Self
    where
        F: Fn(f64, f64) -> Complex64 + Sync,
    {
        let mut out = Self::zeros(n, dx);
        let c = (n / 2) as f64;
        out.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let x = (i as f64 - c) * dx;
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(x, (j as f64 - c) * dx);
            }
        });
        out
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.dx
    }

    /// Σ|u|²·dx², summed row by row in a fixed order.
    pub fn power(&self) -> f64 {
        row_sums(&self.data, self.n, |v| v.norm_sqr())
            .iter()
            .sum::<f64>()
            * self.dx
            * self.dx
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.data.par_iter().map(|v| v.norm_sqr()).collect()
    }

    /// Multiplies by a real mask evaluated at sample positions.
    pub fn apply_mask<F>(&mut self, mask: F)
    where
        F: Fn(f64, f64) -> f64 + Sync,
    {
        let n = self.n;
        let dx = self.dx;
        let c = (n / 2) as f64;
        self.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| {
                let x = (i as f64 - c) * dx;
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= mask(x, (j as f64 - c) * dx);
                }
            });
    }

    /// Fraction of the energy within `width` samples of any edge.
    pub fn border_fraction(&self, width: usize) -> f64 {
        let n = self.n;
        let edge = row_sums_indexed(&self.data, n, |i, j, v| {
            let near = i < width || j < width || i >= n - width || j >= n - width;
            if near {
                v.norm_sqr()
            } else {
                0.0
            }
        });
        let total: f64 = row_sums(&self.data, n, |v| v.norm_sqr()).iter().sum();
        if total > 0.0 {
            edge.iter().sum::<f64>() / total
        } else {
            0.0
        }
    }

    /// Little-endian raster of the intensity in a `half`-sample window
    /// around `(ci, cj)`: u64 rows, u64 cols, f64 spacing (µm), f64 x of the
    /// first row, f64 z of the first column, then row-major f64 values.
    pub fn write_intensity_raster<W: Write>(
        &self,
        mut w: W,
        (ci, cj): (usize, usize),
        half: usize,
    ) -> std::io::Result<()> {
        let i0 = ci.saturating_sub(half);
        let j0 = cj.saturating_sub(half);
        let i1 = (ci + half + 1).min(self.n);
        let j1 = (cj + half + 1).min(self.n);
        w.write_all(&((i1 - i0) as u64).to_le_bytes())?;
        w.write_all(&((j1 - j0) as u64).to_le_bytes())?;
        w.write_all(&self.dx.to_le_bytes())?;
        w.write_all(&self.coord(i0).to_le_bytes())?;
        w.write_all(&self.coord(j0).to_le_bytes())?;
        for i in i0..i1 {
            for j in j0..j1 {
                w.write_all(&self.data[i * self.n + j].norm_sqr().to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn row_sums<F: Fn(&Complex64) -> f64 + Sync>(data: &[Complex64], n: usize, f: F) -> Vec<f64> {
    data.par_chunks(n)
        .map(|row| row.iter().map(&f).sum())
        .collect()
}

fn row_sums_indexed<F>(data: &[Complex64], n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize, &Complex64) -> f64 + Sync,
{
    data.par_chunks(n)
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, v)| f(i, j, v)).sum())
        .collect()
}

fn fft_rows(data: &mut [Complex64], n: usize, fft: &Arc<dyn Fft<f64>>) {
    let scratch_len = fft.get_inplace_scratch_len();
    data.par_chunks_mut(n).for_each_init(
        || vec![Complex64::new(0.0, 0.0); scratch_len],
        |scratch, row| fft.process_with_scratch(row, scratch),
    );
}

fn transpose(data: &mut [Complex64], n: usize) {
    const B: usize = 32;
    for bi in (0..n).step_by(B) {
        for bj in (bi..n).step_by(B) {
            for i in bi..(bi + B).min(n) {
                for j in bj.max(i + 1)..(bj + B).min(n) {
                    data.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

/// Result of one transfer-function step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub distance_um: f64,
    pub index: f64,
    pub power_in: f64,
    /// Input power carried by homogeneous plane waves.
    pub power_propagating: f64,
    pub power_out: f64,
    /// |power_out − power_propagating| / power_propagating
    pub relative_error: f64,
    pub border_fraction: f64,
}

/// Angular-spectrum propagation over `distance` µm in a medium of index
/// `index`. Components outside the homogeneous-wave circle are dropped.
pub fn angular_spectrum_propagate(
    field: &mut ComplexField2D,
    distance: f64,
    index: f64,
    wavelength_um: f64,
) -> Result<PropagationReport, WaveError> {
    if !(index >= 1.0) || !(wavelength_um > 0.0) || !distance.is_finite() {
        return Err(WaveError::Domain(
            "index must be >= 1, wavelength > 0 and distance finite".into(),
        ));
    }
    let n = field.n;
    let power_in = field.power();
    if distance == 0.0 {
        return Ok(PropagationReport {
            distance_um: 0.0,
            index,
            power_in,
            power_propagating: power_in,
            power_out: power_in,
            relative_error: 0.0,
            border_fraction: field.border_fraction(2),
        });
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let data = &mut field.data;
    fft_rows(data, n, &fwd);
    transpose(data, n);
    fft_rows(data, n, &fwd);

    // Spectrum now indexed [kz * n + kx].
    let k = TAU * index / wavelength_um;
    let df = TAU / (n as f64 * field.dx);
    let freq = |m: usize| {
        let m = if m < n.div_ceil(2) {
            m as f64
        } else {
            m as f64 - n as f64
        };
        m * df
    };
    let prop: Vec<f64> = data
        .par_chunks_mut(n)
        .enumerate()
        .map(|(a, row)| {
            let ka = freq(a);
            let mut kept = 0.0;
            for (b, v) in row.iter_mut().enumerate() {
                let kb = freq(b);
                let ky2 = k * k - ka * ka - kb * kb;
                if ky2 > 0.0 {
                    kept += v.norm_sqr();
                    *v *= Complex64::from_polar(1.0, ky2.sqrt() * distance);
                } else {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
            kept
        })
        .collect();
    let norm = (n * n) as f64;
    let power_propagating = prop.iter().sum::<f64>() / norm * field.dx * field.dx;

    fft_rows(data, n, &inv);
    transpose(data, n);
    fft_rows(data, n, &inv);
    let scale = 1.0 / norm;
    data.par_iter_mut().for_each(|v| *v *= scale);

    let power_out = field.power();
    let relative_error = if power_propagating > 0.0 {
        (power_out - power_propagating).abs() / power_propagating
    } else {
        0.0
    };
    let border_fraction = field.border_fraction(2);
    if border_fraction > ALIAS_TOL {
        return Err(WaveError::Aliasing {
            fraction: border_fraction,
        });
    }
    Ok(PropagationReport {
        distance_um: distance,
        index,
        power_in,
        power_propagating,
        power_out,
        relative_error,
        border_fraction,
    })
}

/// Sampling grid for the focal-spot simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n: usize,
    /// µm
    pub dx: f64,
    /// Width (samples) of the cos² absorbing layer at each edge.
    pub border: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n: 4096,
            dx: 0.1,
            border: 256,
        }
    }
}

impl GridSpec {
    /// Twice the resolution over the same extent.
    pub fn refined(&self) -> Self {
        Self {
            n: 2 * self.n,
            dx: 0.5 * self.dx,
            border: 2 * self.border,
        }
    }

    pub fn validate(&self) -> Result<(), WaveError> {
        if self.n < 16 || !self.n.is_multiple_of(2) || !(self.dx > 0.0) || 2 * self.border >= self.n
        {
            return Err(WaveError::Domain(format!(
                "grid needs even n >= 16, dx > 0 and border < n/2 (got n = {}, dx = {}, border = {})",
                self.n, self.dx, self.border
            )));
        }
        Ok(())
    }

    fn taper(&self) -> impl Fn(f64, f64) -> f64 + Sync {
        let half = (self.n / 2) as f64 * self.dx;
        let w = self.border as f64 * self.dx;
        move |x: f64, z: f64| {
            let edge = |t: f64| {
                let d = half - t.abs();
                if w == 0.0 || d >= w {
                    1.0
                } else {
                    (0.5 * std::f64::consts::PI * (d / w).max(0.0))
                        .sin()
                        .powi(2)
                }
            };
            edge(x) * edge(z)
        }
    }
}

/// Complex transmission of a lens at a point in its plane.
pub trait LensTransmission: Sync {
    /// `None` outside the lens.
    fn transmission(&self, x_um: f64, z_um: f64) -> Option<Complex64>;
}

impl LensTransmission for PhaseProfile {
    fn transmission(&self, x: f64, z: f64) -> Option<Complex64> {
        self.phase_at(x.hypot(z))
            .map(|p| Complex64::from_polar(1.0, p))
    }
}

impl LensTransmission for CompiledLens {
    fn transmission(&self, x: f64, z: f64) -> Option<Complex64> {
        self.sample(x, z)
            .map(|(p, t)| Complex64::from_polar(t.sqrt(), p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfMetrics {
    pub fwhm_x: f64,
    pub fwhm_z: f64,
    /// (x, z, y) µm; y is the distance of the evaluation plane above the
    /// electrode surface.
    pub peak: [f64; 3],
    /// Focal-plane power inside the rectangle bounded by the first minima.
    pub encircled_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PsfResult {
    pub metrics: PsfMetrics,
    pub field: ComplexField2D,
    pub steps: Vec<PropagationReport>,
    /// Peak grid index (ix, iz).
    pub peak_index: (usize, usize),
}

impl PsfResult {
    pub fn max_power_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.relative_error)
            .fold(0.0, f64::max)
    }

    /// Intensity along x through the peak.
    pub fn cut_x(&self) -> Vec<f64> {
        let n = self.field.n;
        (0..n)
            .map(|i| self.field.data[i * n + self.peak_index.1].norm_sqr())
            .collect()
    }

    /// Intensity along z through the peak.
    pub fn cut_z(&self) -> Vec<f64> {
        let n = self.field.n;
        let row = self.peak_index.0 * n;
        self.field.data[row..row + n]
            .iter()
            .map(|v| v.norm_sqr())
            .collect()
    }
}

fn opening_mask(o: RectOpening) -> impl Fn(f64, f64) -> f64 + Sync {
    move |x: f64, z: f64| {
        if (x - o.center_x).abs() <= o.half_width && (z - o.center_z).abs() <= o.half_length {
            1.0
        } else {
            0.0
        }
    }
}

/// Focal spot of `lens` illuminated by a unit plane wave from the backside.
///
/// `stack` lists layers from the focal plane (ion) down to the lens; the
/// openings of `openings` sit at `source_height + depth` above the lens-side
/// focal plane and act as opaque-outside binary masks.
pub fn simulate_psf(
    lens: &dyn LensTransmission,
    stack: &LayerStack,
    openings: &ApertureStack,
    wavelength_nm: f64,
    grid: GridSpec,
) -> Result<PsfResult, WaveError> {
    grid.validate()?;
    stack
        .validate()
        .map_err(|e| WaveError::Domain(e.to_string()))?;
    openings
        .validate()
        .map_err(|e| WaveError::Domain(e.to_string()))?;
    let lambda = wavelength_nm * 1e-3;
    let total = stack.total_thickness();

    // Planes as distances from the focal plane, walked from the lens upward.
    let mut layer_top = Vec::with_capacity(stack.layers.len());
    let mut acc = 0.0;
    for l in &stack.layers {
        layer_top.push(acc);
        acc += l.thickness;
    }
    let mut masks: Vec<(f64, RectOpening)> = openings
        .openings
        .iter()
        .map(|o| (openings.source_height + o.depth, *o))
        .collect();
    if masks.iter().any(|(d, _)| *d <= 0.0 || *d >= total) {
        return Err(WaveError::Domain(
            "every opening must lie strictly between the focal plane and the lens".into(),
        ));
    }
    masks.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut field = ComplexField2D::from_fn(grid.n, grid.dx, |x, z| {
        lens.transmission(x, z).unwrap_or(Complex64::new(0.0, 0.0))
    });
    let taper = grid.taper();
    field.apply_mask(&taper);

    let mut steps = Vec::new();
    let mut pos = total;
    let mut mask_iter = masks.into_iter().peekable();
    for (li, layer) in stack.layers.iter().enumerate().rev() {
        let top = layer_top[li];
        loop {
            let target = match mask_iter.peek() {
                Some((d, _)) if *d >= top => *d,
                _ => top,
            };
            let dist = pos - target;
            if dist > 0.0 {
                steps.push(angular_spectrum_propagate(
                    &mut field,
                    dist,
                    layer.index,
                    lambda,
                )?);
                field.apply_mask(&taper);
                pos = target;
            }
            match mask_iter.peek() {
                Some((d, o)) if *d >= top && *d == pos => {
                    field.apply_mask(opening_mask(*o));
                    mask_iter.next();
                }
                _ => break,
            }
        }
    }

    let n = grid.n;
    let intensity = field.intensity();
    let (peak_k, _) = intensity
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
        );
    let (pi, pj) = (peak_k / n, peak_k % n);
    if pi < 2 || pj < 2 || pi + 2 >= n || pj + 2 >= n {
        return Err(WaveError::Measurement(
            "focal peak at the grid border".into(),
        ));
    }
    let cut_x: Vec<f64> = (0..n).map(|i| intensity[i * n + pj]).collect();
    let cut_z: Vec<f64> = intensity[pi * n..(pi + 1) * n].to_vec();
    let fwhm_x = fwhm(&cut_x, grid.dx)?;
    let fwhm_z = fwhm(&cut_z, grid.dx)?;
    let mx = first_minimum_offset(&cut_x, pi);
    let mz = first_minimum_offset(&cut_z, pj);
    let mut inside = 0.0;
    for i in pi.saturating_sub(mx)..=(pi + mx).min(n - 1) {
        for j in pj.saturating_sub(mz)..=(pj + mz).min(n - 1) {
            inside += intensity[i * n + j];
        }
    }
    let total_i: f64 = intensity
        .par_chunks(n)
        .map(|r| r.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let metrics = PsfMetrics {
        fwhm_x,
        fwhm_z,
        peak: [field.coord(pi), field.coord(pj), openings.source_height],
        encircled_fraction: if total_i > 0.0 { inside / total_i } else { 0.0 },
    };
    Ok(PsfResult {
        metrics,
        field,
        steps,
        peak_index: (pi, pj),
    })
}

/// Samples from the peak to the first local minimum on the narrower side.
fn first_minimum_offset(cut: &[f64], peak: usize) -> usize {
    let mut right = peak;
    while right + 1 < cut.len() && cut[right + 1] < cut[right] {
        right += 1;
    }
    let mut left = peak;
    while left > 0 && cut[left - 1] < cut[left] {
        left -= 1;
    }
    (right - peak).min(peak - left)
}

/// Full width at half maximum of a sampled profile with spacing `dx`, by
/// linear interpolation of the half-maximum crossings nearest the peak.
pub fn fwhm(profile: &[f64], dx: f64) -> Result<f64, WaveError> {
    let (peak, max) = profile
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    if peak == 0 || peak + 1 >= profile.len() || !(max > 0.0) {
        return Err(WaveError::Measurement(
            "profile maximum must be positive and away from the endpoints".into(),
        ));
    }
    let half = 0.5 * max;
    let mut l = peak;
    while l > 0 && profile[l - 1] >= half {
        l -= 1;
    }
    if l == 0 {
        return Err(WaveError::Measurement(
            "no half-maximum crossing on the left".into(),
        ));
    }
    let left = (l - 1) as f64 + (half - profile[l - 1]) / (profile[l] - profile[l - 1]);
    let mut r = peak;
    while r + 1 < profile.len() && profile[r + 1] >= half {
        r += 1;
    }
    if r + 1 >= profile.len() {
        return Err(WaveError::Measurement(
            "no half-maximum crossing on the right".into(),
        ));
    }
    let right = r as f64 + (profile[r] - half) / (profile[r] - profile[r + 1]);
    Ok((right - left) * dx)
}

/// Normal-incidence power transmission of one index step.
pub fn fresnel_transmission(n1: f64, n2: f64) -> f64 {
    let r = (n1 - n2) / (n1 + n2);
    1.0 - r * r
}

/// Product of the Fresnel transmissions at every index step of `stack` and
/// the metalens power transmittance.
pub fn transmittance_budget(stack: &LayerStack, metalens_transmittance: f64) -> f64 {
    stack
        .layers
        .windows(2)
        .map(|w| fresnel_transmission(w[0].index, w[1].index))
        .product::<f64>()
        * metalens_transmittance
}

/// Metalens transmittance that makes the stack budget equal `total`.
pub fn metalens_transmittance_for(stack: &LayerStack, total: f64) -> f64 {
    total / transmittance_budget(stack, 1.0)
}

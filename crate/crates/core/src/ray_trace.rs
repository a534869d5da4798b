//! Sequential Monte Carlo ray tracing through the trap chip and the
//! free-space detection optics.
//!
//! Rays are straight lines `x(s) = x₀ + u·s`, `z(s) = z₀ + v·s` along the
//! optical axis `s` (mm, measured from the emitter plane downward through the
//! chip). Thin lenses act in tangent space, `u' = u − x/f`, which maps every
//! ray from a front focal point to a parallel bundle.

use crate::collection_geometry::{ApertureStack, CollectionError};
use crate::metalens_design::LayerStack;
use crate::rng::{blocks, substream};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::Write;
use thiserror::Error;

/// Acceptance half-angle quoted for the fabricated aperture (degrees).
pub const QUOTED_ACCEPTANCE_DEG: f64 = 8.46;
/// Divergence half-angle of the emulated emitter (degrees).
pub const EMULATOR_DIVERGENCE_DEG: f64 = 10.98;

#[derive(Debug, Error)]
pub enum RayError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid train: {0}")]
    Train(String),
    #[error(transparent)]
    Collection(#[from] CollectionError),
}

/// Frame an element is fixed in. Chip elements follow lateral chip moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mount {
    Chip,
    Lab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ElementKind {
    /// Electrode aperture and undercut; tested from the emitter plane.
    Stack {
        stack: ApertureStack,
    },
    /// Plane-parallel dielectric slab starting at the element position.
    Slab {
        thickness_mm: f64,
        index: f64,
    },
    ThinLens {
        focal_length_mm: f64,
        radius_mm: f64,
    },
    Stop {
        radius_mm: f64,
    },
    /// Square detector; terminates the train.
    Detector {
        half_size_mm: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    pub position_mm: f64,
    pub mount: Mount,
    pub kind: ElementKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupTag {
    Objective,
    Integrated,
}

impl SetupTag {
    pub fn name(&self) -> &'static str {
        match self {
            SetupTag::Objective => "objective",
            SetupTag::Integrated => "integrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalTrain {
    pub setup: SetupTag,
    pub elements: Vec<Element>,
}

impl OpticalTrain {
    pub fn validate(&self) -> Result<(), RayError> {
        let Some(last) = self.elements.last() else {
            return Err(RayError::Train("train is empty".into()));
        };
        if !matches!(last.kind, ElementKind::Detector { .. }) {
            return Err(RayError::Train(
                "the last element must be the detector".into(),
            ));
        }
        let mut prev = f64::NEG_INFINITY;
        let mut slab_end = 0.0;
        for (k, e) in self.elements.iter().enumerate() {
            if !(e.position_mm > prev) || e.position_mm < slab_end {
                return Err(RayError::Train(format!(
                    "element `{}` must sit strictly after the previous one and outside any slab",
                    e.name
                )));
            }
            prev = e.position_mm;
            match &e.kind {
                ElementKind::Stack { stack } => {
                    if k != 0 || e.position_mm != 0.0 || e.mount != Mount::Chip {
                        return Err(RayError::Train(
                            "the aperture stack must be the first, chip-mounted element at 0"
                                .into(),
                        ));
                    }
                    stack.validate()?;
                }
                ElementKind::Slab {
                    thickness_mm,
                    index,
                } => {
                    if !(*thickness_mm > 0.0) || !(*index >= 1.0) {
                        return Err(RayError::Train(format!(
                            "slab `{}` needs thickness > 0 and index >= 1",
                            e.name
                        )));
                    }
                    slab_end = e.position_mm + thickness_mm;
                }
                ElementKind::ThinLens {
                    focal_length_mm,
                    radius_mm,
                } => {
                    if *focal_length_mm == 0.0
                        || !focal_length_mm.is_finite()
                        || !(*radius_mm > 0.0)
                    {
                        return Err(RayError::Train(format!(
                            "lens `{}` needs a finite non-zero focal length and radius > 0",
                            e.name
                        )));
                    }
                }
                ElementKind::Stop { radius_mm } => {
                    if !(*radius_mm > 0.0) {
                        return Err(RayError::Train(format!(
                            "stop `{}` needs radius > 0",
                            e.name
                        )));
                    }
                }
                ElementKind::Detector { half_size_mm } => {
                    if k + 1 != self.elements.len() || !(*half_size_mm > 0.0) {
                        return Err(RayError::Train(
                            "exactly one detector with half size > 0, at the end".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn stack(&self) -> Option<&ApertureStack> {
        match self.elements.first().map(|e| &e.kind) {
            Some(ElementKind::Stack { stack }) => Some(stack),
            _ => None,
        }
    }

    /// Copy with the aperture stack's source height set to `height_um`.
    fn with_source_height(&self, height_um: f64) -> Self {
        let mut t = self.clone();
        if let Some(Element {
            kind: ElementKind::Stack { stack },
            ..
        }) = t.elements.first_mut()
        {
            stack.source_height = height_um;
        }
        t
    }

    /// Mutable radius of the named lens or stop, for what-if studies.
    pub fn aperture_radius_mut(&mut self, name: &str) -> Option<&mut f64> {
        self.elements
            .iter_mut()
            .find(|e| e.name == name)
            .and_then(|e| match &mut e.kind {
                ElementKind::ThinLens { radius_mm, .. } | ElementKind::Stop { radius_mm } => {
                    Some(radius_mm)
                }
                ElementKind::Detector { half_size_mm } => Some(half_size_mm),
                _ => None,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Emission {
    Isotropic,
    Cone { half_angle_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySource {
    /// (x, y, z) µm relative to the aperture centre; y is the height above
    /// the electrode plane.
    pub position_um: [f64; 3],
    pub emission: Emission,
    pub n_rays: usize,
    pub seed: u64,
}

impl RaySource {
    pub fn validate(&self) -> Result<(), RayError> {
        if self.n_rays < 1000 {
            return Err(RayError::Domain(format!(
                "at least 1000 rays are needed, got {}",
                self.n_rays
            )));
        }
        if !(self.position_um[1] > 0.0) {
            return Err(RayError::Domain("source height must be > 0".into()));
        }
        if let Emission::Cone { half_angle_deg } = self.emission {
            if !(half_angle_deg > 0.0 && half_angle_deg < 90.0) {
                return Err(RayError::Domain(format!(
                    "cone half-angle must lie in (0°, 90°), got {half_angle_deg}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceStatus {
    Detected,
    /// Index of the blocking element.
    Vignetted(usize),
}

/// Traces one ray leaving the source at `source_um` (chip frame) with
/// direction tangents `(u, v)`, the chip displaced laterally by
/// `chip_offset_mm` along x.
pub fn trace_ray(
    train: &OpticalTrain,
    source_um: [f64; 3],
    (mut u, mut v): (f64, f64),
    chip_offset_mm: f64,
) -> TraceStatus {
    let mut x = chip_offset_mm + source_um[0] * 1e-3;
    let mut z = source_um[2] * 1e-3;
    let mut s = 0.0;
    for (k, e) in train.elements.iter().enumerate() {
        x += u * (e.position_mm - s);
        z += v * (e.position_mm - s);
        s = e.position_mm;
        let cx = match e.mount {
            Mount::Chip => chip_offset_mm,
            Mount::Lab => 0.0,
        };
        let (rx, rz) = (x - cx, z);
        match &e.kind {
            ElementKind::Stack { stack } => {
                if !stack.passes((source_um[0], source_um[2]), u, v) {
                    return TraceStatus::Vignetted(k);
                }
            }
            ElementKind::Slab {
                thickness_mm,
                index,
            } => {
                let t2 = u * u + v * v;
                if t2 > 0.0 {
                    let sin2 = t2 / (1.0 + t2) / (index * index);
                    let scale = (sin2 / (1.0 - sin2)).sqrt() / t2.sqrt();
                    x += u * scale * thickness_mm;
                    z += v * scale * thickness_mm;
                }
                s += thickness_mm;
            }
            ElementKind::ThinLens {
                focal_length_mm,
                radius_mm,
            } => {
                if rx * rx + rz * rz > radius_mm * radius_mm {
                    return TraceStatus::Vignetted(k);
                }
                u -= rx / focal_length_mm;
                v -= rz / focal_length_mm;
            }
            ElementKind::Stop { radius_mm } => {
                if rx * rx + rz * rz > radius_mm * radius_mm {
                    return TraceStatus::Vignetted(k);
                }
            }
            ElementKind::Detector { half_size_mm } => {
                return if rx.abs() <= *half_size_mm && rz.abs() <= *half_size_mm {
                    TraceStatus::Detected
                } else {
                    TraceStatus::Vignetted(k)
                };
            }
        }
    }
    TraceStatus::Vignetted(train.elements.len())
}

/// Half-angle (rad) of the smallest axis-centred cone containing every
/// direction the aperture stack can pass from `source_um`; `None` when the
/// stack blocks everything.
pub fn bounding_cone(stack: &ApertureStack, source_um: [f64; 3]) -> Option<f64> {
    let mut st = stack.clone();
    st.source_height = source_um[1];
    let w = st.angular_window((source_um[0], source_um[2]))?;
    let t2 = [w.u0.abs(), w.u1.abs()]
        .iter()
        .fold(0.0_f64, |m, a| m.max(*a))
        .powi(2)
        + [w.v0.abs(), w.v1.abs()]
            .iter()
            .fold(0.0_f64, |m, a| m.max(*a))
            .powi(2);
    Some(t2.sqrt().atan())
}

/// Solid-angle fraction of 4π inside a cone of half-angle `theta` (rad).
pub fn cone_fraction(theta: f64) -> f64 {
    0.5 * (1.0 - theta.cos())
}

/// Isotropic-equivalent efficiency (%) of a cone emitter of half-angle
/// `half_angle_deg` whose detected fraction of cone power is `detected`.
pub fn cone_to_isotropic(detected: f64, half_angle_deg: f64) -> Result<f64, RayError> {
    if !(half_angle_deg > 0.0 && half_angle_deg < 90.0) {
        return Err(RayError::Domain(format!(
            "cone half-angle must lie in (0°, 90°), got {half_angle_deg}"
        )));
    }
    Ok(100.0 * detected * cone_fraction(half_angle_deg.to_radians()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    /// % of 4π emission reaching the detector, times the transmittance.
    pub percent: f64,
    pub stderr: f64,
    pub hits: u64,
    pub n_rays: u64,
}

/// Detected fraction of 4π emission (in %) for `source` with the chip
/// displaced by `chip_offset_mm`, scaled by the power transmittance `t`.
///
/// Isotropic emission is sampled uniformly inside the cone bounding the
/// aperture stack's acceptance; directions outside it are blocked anyway.
pub fn detection_efficiency(
    train: &OpticalTrain,
    source: &RaySource,
    t: f64,
    chip_offset_mm: f64,
) -> Result<Efficiency, RayError> {
    train.validate()?;
    source.validate()?;
    let train = train.with_source_height(source.position_um[1]);
    let theta = match source.emission {
        Emission::Cone { half_angle_deg } => half_angle_deg.to_radians(),
        Emission::Isotropic => match train.stack() {
            Some(stack) => match bounding_cone(stack, source.position_um) {
                Some(t) => t,
                None => {
                    return Ok(Efficiency {
                        percent: 0.0,
                        stderr: 0.0,
                        hits: 0,
                        n_rays: source.n_rays as u64,
                    })
                }
            },
            None => 0.5 * PI,
        },
    };
    let cos_max = theta.cos();
    let pos = source.position_um;
    let hits: u64 = blocks(source.n_rays)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(b, count)| {
            let mut rng = substream(source.seed, b);
            let mut h = 0u64;
            for _ in 0..count {
                let c: f64 = 1.0 - rng.gen::<f64>() * (1.0 - cos_max);
                let phi = TAU * rng.gen::<f64>();
                if c <= 0.0 {
                    continue;
                }
                let tan = (1.0 - c * c).max(0.0).sqrt() / c;
                let dir = (tan * phi.cos(), tan * phi.sin());
                if trace_ray(&train, pos, dir, chip_offset_mm) == TraceStatus::Detected {
                    h += 1;
                }
            }
            h
        })
        .sum();
    let n = source.n_rays as f64;
    let p = hits as f64 / n;
    let scale = 100.0 * cone_fraction(theta) * t;
    Ok(Efficiency {
        percent: p * scale,
        stderr: (p * (1.0 - p) / n).sqrt() * scale,
        hits,
        n_rays: source.n_rays as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub displacement: f64,
    pub efficiency_pct: f64,
    pub stderr_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    /// CSV name of the displacement column, `d_mm` or `dprime_um`.
    pub axis: String,
    pub points: Vec<CurvePoint>,
}

impl EfficiencyCurve {
    pub fn max(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.efficiency_pct)
            .fold(0.0, f64::max)
    }

    pub fn value_at(&self, displacement: f64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| (p.displacement - displacement).abs() < 1e-12)
    }

    /// First displacement (past the maximum) where the curve falls below
    /// `level` × maximum, linearly interpolated between samples.
    pub fn falloff(&self, level: f64) -> Option<f64> {
        let max = self.max();
        let peak = self.points.iter().position(|p| p.efficiency_pct == max)?;
        let thr = level * max;
        for k in peak + 1..self.points.len() {
            let (a, b) = (&self.points[k - 1], &self.points[k]);
            if b.efficiency_pct < thr {
                let f = (a.efficiency_pct - thr) / (a.efficiency_pct - b.efficiency_pct);
                return Some(a.displacement + f * (b.displacement - a.displacement));
            }
        }
        None
    }

    /// CSV with the train echoed as a `#` JSON comment line.
    pub fn write_csv<W: Write>(&self, mut w: W, train: &OpticalTrain) -> std::io::Result<()> {
        let json = serde_json::to_string(train).map_err(std::io::Error::other)?;
        writeln!(w, "# train: {json}")?;
        writeln!(w, "{},efficiency_pct,stderr_pct", self.axis)?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{}",
                p.displacement, p.efficiency_pct, p.stderr_pct
            )?;
        }
        Ok(())
    }
}

/// Efficiency versus lateral chip displacement `d` (mm); the source and
/// every chip-mounted element move together, lab elements stay put. Every
/// point reuses the same random numbers.
pub fn lateral_scan(
    train: &OpticalTrain,
    source: &RaySource,
    t: f64,
    d_values: &[f64],
) -> Result<EfficiencyCurve, RayError> {
    if d_values.iter().any(|d| !(*d >= 0.0)) {
        return Err(RayError::Domain(
            "lateral displacements must be >= 0".into(),
        ));
    }
    let points = d_values
        .iter()
        .map(|&d| {
            let e = detection_efficiency(train, source, t, d)?;
            Ok(CurvePoint {
                displacement: d,
                efficiency_pct: e.percent,
                stderr_pct: e.stderr,
            })
        })
        .collect::<Result<_, RayError>>()?;
    Ok(EfficiencyCurve {
        axis: "d_mm".into(),
        points,
    })
}

/// Efficiency versus displacement `d′` (µm) of the source alone along the
/// aperture's long axis.
pub fn axial_scan(
    train: &OpticalTrain,
    source: &RaySource,
    t: f64,
    dprime_values: &[f64],
) -> Result<EfficiencyCurve, RayError> {
    let limit = train
        .stack()
        .map(|s| 2.0 * s.openings[0].half_length)
        .unwrap_or(f64::INFINITY);
    if dprime_values.iter().any(|d| !(d.abs() <= limit)) {
        return Err(RayError::Domain(format!(
            "axial displacements must lie within ±{limit} µm"
        )));
    }
    let points = dprime_values
        .iter()
        .map(|&d| {
            let mut s = *source;
            s.position_um[2] = source.position_um[2] + d;
            let e = detection_efficiency(train, &s, t, 0.0)?;
            Ok(CurvePoint {
                displacement: d,
                efficiency_pct: e.percent,
                stderr_pct: e.stderr,
            })
        })
        .collect::<Result<_, RayError>>()?;
    Ok(EfficiencyCurve {
        axis: "dprime_um".into(),
        points,
    })
}

/// Free-space parameters of both detection setups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub objective_focal_mm: f64,
    /// NA 0.5: f · tan(asin 0.5).
    pub objective_radius_mm: f64,
    /// Objective to focusing lens.
    pub relay_mm: f64,
    /// Chip backside to focusing lens in the integrated setup.
    pub integrated_relay_mm: f64,
    pub focusing_focal_mm: f64,
    pub focusing_radius_mm: f64,
    pub detector_half_mm: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            objective_focal_mm: 10.0,
            objective_radius_mm: 10.0 * (0.5_f64).asin().tan(),
            relay_mm: 143.4,
            integrated_relay_mm: 50.0,
            focusing_focal_mm: 100.0,
            focusing_radius_mm: 12.63,
            detector_half_mm: 12.7,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), RayError> {
        let named = [
            ("objective_focal_mm", self.objective_focal_mm),
            ("objective_radius_mm", self.objective_radius_mm),
            ("relay_mm", self.relay_mm),
            ("integrated_relay_mm", self.integrated_relay_mm),
            ("focusing_focal_mm", self.focusing_focal_mm),
            ("focusing_radius_mm", self.focusing_radius_mm),
            ("detector_half_mm", self.detector_half_mm),
        ];
        for (k, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(RayError::Domain(format!("`{k}` must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Chip part of a train: aperture stack plus one slab per dielectric layer.
/// Returns the elements and the chip's backside position (mm).
fn chip_elements(stack: &ApertureStack, layers: &LayerStack) -> (Vec<Element>, f64) {
    let mut els = vec![Element {
        name: "aperture_stack".into(),
        position_mm: 0.0,
        mount: Mount::Chip,
        kind: ElementKind::Stack {
            stack: stack.clone(),
        },
    }];
    let mut s = 0.0;
    for l in &layers.layers {
        let t = l.thickness * 1e-3;
        if l.index != 1.0 {
            els.push(Element {
                name: l.name.clone(),
                position_mm: s,
                mount: Mount::Chip,
                kind: ElementKind::Slab {
                    thickness_mm: t,
                    index: l.index,
                },
            });
        }
        s += t;
    }
    (els, s)
}

fn relay_elements(p: &TrainParams, lens_at: f64) -> [Element; 2] {
    [
        Element {
            name: "focusing_lens".into(),
            position_mm: lens_at,
            mount: Mount::Lab,
            kind: ElementKind::ThinLens {
                focal_length_mm: p.focusing_focal_mm,
                radius_mm: p.focusing_radius_mm,
            },
        },
        Element {
            name: "detector".into(),
            position_mm: lens_at + p.focusing_focal_mm,
            mount: Mount::Lab,
            kind: ElementKind::Detector {
                half_size_mm: p.detector_half_mm,
            },
        },
    ]
}

/// Objective setup: the objective (fixed) is focused on the emitter through
/// the chip, followed by a relay to the focusing lens and detector.
pub fn objective_train(
    p: &TrainParams,
    stack: &ApertureStack,
    layers: &LayerStack,
) -> Result<OpticalTrain, RayError> {
    p.validate()?;
    let (mut els, back) = chip_elements(stack, layers);
    let s_obj = back + p.objective_focal_mm - layers.reduced_thickness() * 1e-3;
    if !(s_obj > back) {
        return Err(RayError::Domain(
            "objective focal length is shorter than the chip's reduced thickness".into(),
        ));
    }
    els.push(Element {
        name: "objective".into(),
        position_mm: s_obj,
        mount: Mount::Lab,
        kind: ElementKind::ThinLens {
            focal_length_mm: p.objective_focal_mm,
            radius_mm: p.objective_radius_mm,
        },
    });
    els.extend(relay_elements(p, s_obj + p.relay_mm));
    let t = OpticalTrain {
        setup: SetupTag::Objective,
        elements: els,
    };
    t.validate()?;
    Ok(t)
}

/// Integrated setup: an ideal collimator of focal length equal to the
/// emitter's reduced distance sits on the chip backside and moves with it.
pub fn integrated_train(
    p: &TrainParams,
    stack: &ApertureStack,
    layers: &LayerStack,
    lens_radius_um: f64,
) -> Result<OpticalTrain, RayError> {
    p.validate()?;
    if !(lens_radius_um > 0.0) {
        return Err(RayError::Domain("lens radius must be > 0".into()));
    }
    let (mut els, back) = chip_elements(stack, layers);
    els.push(Element {
        name: "metalens".into(),
        position_mm: back,
        mount: Mount::Chip,
        kind: ElementKind::ThinLens {
            focal_length_mm: layers.reduced_thickness() * 1e-3,
            radius_mm: lens_radius_um * 1e-3,
        },
    });
    els.extend(relay_elements(p, back + p.integrated_relay_mm));
    let t = OpticalTrain {
        setup: SetupTag::Integrated,
        elements: els,
    };
    t.validate()?;
    Ok(t)
}

/// Lateral displacement (mm) where the efficiency first drops below
/// `level` of its d = 0 value, by bisection on `[0, d_max]` with common
/// random numbers.
pub fn falloff_displacement(
    train: &OpticalTrain,
    source: &RaySource,
    level: f64,
    d_max: f64,
    tol: f64,
) -> Result<Option<f64>, RayError> {
    let e0 = detection_efficiency(train, source, 1.0, 0.0)?.percent;
    let below = |d: f64| -> Result<bool, RayError> {
        Ok(detection_efficiency(train, source, 1.0, d)?.percent < level * e0)
    };
    if !below(d_max)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, d_max);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if below(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Objective-to-focusing-lens distance that puts the objective setup's 90 %
/// falloff at `target_mm`, by bisection over `[lo, hi]` mm.
pub fn calibrate_relay(
    params: &TrainParams,
    stack: &ApertureStack,
    layers: &LayerStack,
    source: &RaySource,
    target_mm: f64,
    (mut lo, mut hi): (f64, f64),
) -> Result<f64, RayError> {
    let d90 = |relay: f64| -> Result<f64, RayError> {
        let p = TrainParams {
            relay_mm: relay,
            ..*params
        };
        let t = objective_train(&p, stack, layers)?;
        falloff_displacement(&t, source, 0.9, 10.0 * target_mm, 1e-4)?
            .ok_or_else(|| RayError::Domain("no falloff inside the search window".into()))
    };
    let (a, b) = (d90(lo)?, d90(hi)?);
    if !(a >= target_mm && b <= target_mm) {
        return Err(RayError::Domain(format!(
            "relay bracket [{lo}, {hi}] mm gives falloff [{a}, {b}] mm, not spanning {target_mm}"
        )));
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if d90(mid)? > target_mm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection_geometry::RectOpening;
    use crate::rng::DEFAULT_SEED;

    fn stack() -> ApertureStack {
        ApertureStack {
            openings: vec![
                RectOpening::centered(0.0, 20.0, 50.0),
                RectOpening::centered(275.0, 55.0, 85.0),
            ],
            source_height: 125.0,
            substrate_thickness: 275.0,
        }
    }

    fn source(n: usize) -> RaySource {
        RaySource {
            position_um: [0.0, 125.0, 0.0],
            emission: Emission::Isotropic,
            n_rays: n,
            seed: DEFAULT_SEED,
        }
    }

    #[test]
    fn on_axis_ray_detected_and_wide_ray_blocked() {
        let t = objective_train(&TrainParams::default(), &stack(), &LayerStack::default()).unwrap();
        let s = [0.0, 125.0, 0.0];
        assert_eq!(trace_ray(&t, s, (0.0, 0.0), 0.0), TraceStatus::Detected);
        assert_eq!(trace_ray(&t, s, (0.5, 0.0), 0.0), TraceStatus::Vignetted(0));
    }

    #[test]
    fn slab_displacement_follows_snell() {
        let t = OpticalTrain {
            setup: SetupTag::Objective,
            elements: vec![
                Element {
                    name: "glass".into(),
                    position_mm: 0.0,
                    mount: Mount::Chip,
                    kind: ElementKind::Slab {
                        thickness_mm: 1.0,
                        index: 1.5,
                    },
                },
                Element {
                    name: "det".into(),
                    position_mm: 1.0,
                    mount: Mount::Lab,
                    kind: ElementKind::Detector { half_size_mm: 1.0 },
                },
            ],
        };
        // 45° in vacuum → sin θg = 0.4714, tan θg = 0.5345
        let hit = |h: f64| {
            let mut t = t.clone();
            *t.aperture_radius_mut("det").unwrap() = h;
            trace_ray(&t, [0.0, 1.0, 0.0], (1.0, 0.0), 0.0) == TraceStatus::Detected
        };
        assert!(hit(0.5346));
        assert!(!hit(0.5344));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let t = objective_train(&TrainParams::default(), &stack(), &LayerStack::default()).unwrap();
        assert!(detection_efficiency(&t, &source(10), 1.0, 0.0).is_err());
        let mut bad = t.clone();
        bad.elements.swap(2, 3);
        assert!(bad.validate().is_err());
        assert!(cone_to_isotropic(1.0, 90.0).is_err());
        let mut cone = source(2000);
        cone.emission = Emission::Cone {
            half_angle_deg: 95.0,
        };
        assert!(cone.validate().is_err());
    }

    #[test]
    fn hemisphere_limit() {
        let v = cone_to_isotropic(1.0, 90.0 - 1e-9).unwrap();
        assert!((v - 50.0).abs() < 1e-6);
    }

    #[test]
    fn seed_determinism() {
        let t = integrated_train(
            &TrainParams::default(),
            &stack(),
            &LayerStack::default(),
            150.0,
        )
        .unwrap();
        let a = lateral_scan(&t, &source(20_000), 0.67, &[0.0, 5.0, 12.6]).unwrap();
        let b = lateral_scan(&t, &source(20_000), 0.67, &[0.0, 5.0, 12.6]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn falloff_interpolates() {
        let c = EfficiencyCurve {
            axis: "d_mm".into(),
            points: [(0.0, 1.0), (1.0, 1.0), (2.0, 0.8)]
                .iter()
                .map(|&(d, e)| CurvePoint {
                    displacement: d,
                    efficiency_pct: e,
                    stderr_pct: 0.0,
                })
                .collect(),
        };
        assert!((c.falloff(0.9).unwrap() - 1.5).abs() < 1e-12);
        assert!(c.falloff(0.5).is_none());
    }
}

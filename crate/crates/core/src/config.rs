//! Run configuration: a single TOML file, every key optional, unknown keys
//! rejected. An empty file yields the nominal device.

use crate::collection_geometry::{ApertureStack, CalibrationMode, RectOpening};
use crate::metalens_design::LayerStack;
use crate::ray_trace::TrainParams;
use crate::rng::DEFAULT_SEED;
use crate::trap_model::{IonSpecies, RfDrive, TrapLayout};
use crate::wave_optics::GridSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {constraint}")]
    Invalid { key: String, constraint: String },
}

fn invalid(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_owned(),
        constraint: constraint.into(),
    }
}

/// Inclusive `start..=end` grid with spacing `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Range {
    pub const fn new(start: f64, end: f64, step: f64) -> Self {
        Self { start, end, step }
    }

    pub fn validate(&self, key: &str) -> Result<(), ConfigError> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.start > self.end {
            return Err(invalid(key, "start must not exceed end"));
        }
        if !(self.step > 0.0) {
            return Err(invalid(key, "step must be > 0"));
        }
        Ok(())
    }

    /// Grid values; the end point is included when it lies on the grid.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionConfig {
    /// Design ion height used by the optics (µm).
    pub source_height_um: f64,
    pub substrate_thickness_um: f64,
    /// Collection efficiency the undercut is calibrated to (%).
    pub target_efficiency_pct: f64,
    pub calibration_mode: CalibrationMode,
    pub mc_samples: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            source_height_um: 125.0,
            substrate_thickness_um: 275.0,
            target_efficiency_pct: 0.91,
            calibration_mode: CalibrationMode::UniformMargin,
            mc_samples: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LensConfig {
    pub diameter_um: f64,
    pub wavelength_nm: f64,
    pub radial_samples: usize,
    pub fit_order: usize,
    /// CSV `diameter_nm,phase_rad,transmittance`; the synthetic library is
    /// used when absent.
    pub library_path: Option<PathBuf>,
    pub library_period_nm: f64,
    pub grid: GridSpec,
    /// Repeat the focal-spot simulation on a twice-finer grid.
    pub convergence_check: bool,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            diameter_um: 300.0,
            wavelength_nm: 397.0,
            radial_samples: 3001,
            fit_order: 4,
            library_path: None,
            library_period_nm: 250.0,
            grid: GridSpec::default(),
            convergence_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Glass plus metalens power transmittance.
    pub total_transmittance: f64,
    /// Measured detection efficiency at d = 0 (%).
    pub measured_detection_pct: f64,
    /// Power transmittance applied to the objective setup.
    pub objective_transmittance: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            total_transmittance: 0.67,
            measured_detection_pct: 0.58,
            objective_transmittance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub width_um: Range,
    pub length_um: Range,
    pub lateral_objective_mm: Range,
    pub lateral_integrated_mm: Range,
    pub axial_um: Range,
    pub rays_per_point: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            width_um: Range::new(20.0, 300.0, 10.0),
            length_um: Range::new(50.0, 600.0, 25.0),
            lateral_objective_mm: Range::new(0.0, 2.0, 0.02),
            lateral_integrated_mm: Range::new(0.0, 14.0, 0.1),
            axial_um: Range::new(-100.0, 100.0, 12.5),
            rays_per_point: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub trap: TrapLayout,
    pub drive: RfDrive,
    pub ion: IonSpecies,
    pub collection: CollectionConfig,
    pub layers: LayerStack,
    pub lens: LensConfig,
    pub train: TrainParams,
    pub budget: BudgetConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            trap: TrapLayout::default(),
            drive: RfDrive::default(),
            ion: IonSpecies::default(),
            collection: CollectionConfig::default(),
            layers: LayerStack::default(),
            lens: LensConfig::default(),
            train: TrainParams::default(),
            budget: BudgetConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Splits "`key` must ..." style messages from the module validators.
fn keyed(section: &str, msg: String) -> ConfigError {
    let key = msg
        .split_whitespace()
        .find(|w| {
            w.chars()
                .all(|c| c.is_ascii_lowercase() || c == '_' || c == '`')
                && w.contains('_')
        })
        .map(|w| w.trim_matches('`').to_owned());
    match key {
        Some(k) => invalid(&format!("{section}.{k}"), msg),
        None => invalid(section, msg),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trap
            .validate()
            .map_err(|e| keyed("trap", e.to_string()))?;
        self.drive
            .validate()
            .map_err(|e| keyed("drive", e.to_string()))?;
        self.ion
            .validate()
            .map_err(|e| keyed("ion", e.to_string()))?;
        let c = &self.collection;
        if !(c.source_height_um > 0.0) {
            return Err(invalid("collection.source_height_um", "must be > 0"));
        }
        if !(c.substrate_thickness_um > 0.0) {
            return Err(invalid("collection.substrate_thickness_um", "must be > 0"));
        }
        if !(c.target_efficiency_pct > 0.0 && c.target_efficiency_pct < 50.0) {
            return Err(invalid(
                "collection.target_efficiency_pct",
                "must lie in (0, 50)",
            ));
        }
        if c.mc_samples < 1000 {
            return Err(invalid("collection.mc_samples", "must be >= 1000"));
        }
        self.layers
            .validate()
            .map_err(|e| invalid("layers", e.to_string()))?;
        let l = &self.lens;
        if !(l.diameter_um > 0.0) {
            return Err(invalid("lens.diameter_um", "must be > 0"));
        }
        if !(l.wavelength_nm > 0.0) {
            return Err(invalid("lens.wavelength_nm", "must be > 0"));
        }
        if l.radial_samples < 2 {
            return Err(invalid("lens.radial_samples", "must be >= 2"));
        }
        if l.fit_order < 2 {
            return Err(invalid("lens.fit_order", "must be >= 2"));
        }
        if !(l.library_period_nm > 0.0) {
            return Err(invalid("lens.library_period_nm", "must be > 0"));
        }
        l.grid
            .validate()
            .map_err(|e| invalid("lens.grid", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| keyed("train", e.to_string()))?;
        let b = &self.budget;
        for (k, v) in [
            ("budget.total_transmittance", b.total_transmittance),
            ("budget.objective_transmittance", b.objective_transmittance),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(k, "must lie in (0, 1]"));
            }
        }
        if !(b.measured_detection_pct >= 0.0) {
            return Err(invalid("budget.measured_detection_pct", "must be >= 0"));
        }
        let s = &self.sweep;
        s.width_um.validate("sweep.width_um")?;
        s.length_um.validate("sweep.length_um")?;
        s.lateral_objective_mm
            .validate("sweep.lateral_objective_mm")?;
        s.lateral_integrated_mm
            .validate("sweep.lateral_integrated_mm")?;
        s.axial_um.validate("sweep.axial_um")?;
        if s.width_um.start < 0.0 {
            return Err(invalid("sweep.width_um", "start must be >= 0"));
        }
        if s.length_um.start < 0.0 {
            return Err(invalid("sweep.length_um", "start must be >= 0"));
        }
        if s.lateral_objective_mm.start < 0.0 || s.lateral_integrated_mm.start < 0.0 {
            return Err(invalid("sweep.lateral_*_mm", "start must be >= 0"));
        }
        if s.rays_per_point < 1000 {
            return Err(invalid("sweep.rays_per_point", "must be >= 1000"));
        }
        Ok(())
    }

    /// Electrode aperture alone, with the source at the design height.
    pub fn aperture_template(&self) -> ApertureStack {
        ApertureStack {
            openings: vec![RectOpening::centered(
                0.0,
                0.5 * self.trap.aperture_width,
                0.5 * self.trap.aperture_length,
            )],
            source_height: self.collection.source_height_um,
            substrate_thickness: self.collection.substrate_thickness_um,
        }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_owned(),
        source,
    })?;
    RunConfig::from_toml(&text)
}

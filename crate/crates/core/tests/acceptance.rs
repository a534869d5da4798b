//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Oracles here are computed independently of the code
//! under test wherever the criterion allows it.

use std::collections::BTreeMap;
use std::time::Instant;
use trapscope::app::{self, reference, Cli};
use trapscope::collection_geometry::{
    mc_collection, solid_angle_stack, ApertureStack, RectOpening,
};
use trapscope::config::RunConfig;
use trapscope::metalens_design::collimation_phase;
use trapscope::ray_trace::EfficiencyCurve;
use trapscope::trap_model::{
    radial_frequencies, solve_rf_null, sweep_trap, total_potential, RfDrive, SweepParameter,
};

use clap::Parser;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let cfg = RunConfig::default();
    let stack = app::no_undercut_stack(&cfg);
    let eff = solid_angle_stack(&stack, (0.0, 0.0)).unwrap().percent();
    let pass = (eff - reference::NO_UNDERCUT_PCT).abs() <= 0.01;
    outcome(
        pass,
        format!(
            "no-undercut efficiency {eff:.5}% vs {:.2}% ± 0.01 pp",
            reference::NO_UNDERCUT_PCT
        ),
    )
}

fn criterion_2() -> Outcome {
    let stacks = [
        (ApertureStack::single(40.0, 100.0, 125.0), (0.0, 0.0)),
        (ApertureStack::single(40.0, 100.0, 125.0), (15.0, -30.0)),
        (app::no_undercut_stack(&RunConfig::default()), (0.0, 0.0)),
        (app::no_undercut_stack(&RunConfig::default()), (10.0, 25.0)),
        (
            ApertureStack {
                openings: vec![
                    RectOpening::centered(0.0, 20.0, 50.0),
                    RectOpening::centered(275.0, 55.0, 85.0),
                ],
                source_height: 125.0,
                substrate_thickness: 275.0,
            },
            (-5.0, 40.0),
        ),
        (ApertureStack::single(300.0, 80.0, 60.0), (100.0, 0.0)),
    ];
    let mut worst: f64 = 0.0;
    for (k, (stack, src)) in stacks.iter().enumerate() {
        let exact = solid_angle_stack(stack, *src).unwrap().efficiency;
        let mc = mc_collection(stack, *src, 10_000_000, 1000 + k as u64).unwrap();
        worst = worst.max((mc.efficiency - exact).abs() / mc.stderr);
    }
    outcome(
        worst < 3.0,
        format!(
            "{} geometries, worst |MC − quadrature| = {worst:.2} σ (< 3)",
            stacks.len()
        ),
    )
}

fn criterion_3() -> Outcome {
    let cfg = RunConfig::default();
    let cal = app::calibrated_stack(&cfg).unwrap();
    let delta = (cal.efficiency_pct - reference::CALIBRATED_PCT).abs();
    let pts =
        app::collection_sweep(&cfg, &cal, SweepParameter::ApertureLength, &[100.0, 600.0]).unwrap();
    let ratio = pts[1].efficiency / pts[0].efficiency;
    outcome(
        delta < 1e-6 && (2.0..=3.6).contains(&ratio),
        format!(
            "calibrated {:.9}% (|Δ| = {delta:.1e}); η(600)/η(100) = {ratio:.3}; η(600) = {:.3}% (reference {:.2}%)",
            cal.efficiency_pct,
            100.0 * pts[1].efficiency,
            reference::LONG_APERTURE_PCT
        ),
    )
}

/// Brute-force minimum of |E|² on a 0.25 µm grid.
fn grid_null(cfg: &RunConfig) -> (f64, f64) {
    let rects = cfg.trap.electrodes(&cfg.drive);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=240 {
        let x = -30.0 + 0.25 * i as f64;
        for j in 0..=920 {
            let y = 20.0 + 0.25 * j as f64;
            let f = total_potential(&rects, [x, y, 0.0]).unwrap().field_sq();
            if f < best.0 {
                best = (f, x, y);
            }
        }
    }
    (best.1, best.2)
}

fn criterion_4() -> Outcome {
    let cfg = RunConfig::default();
    let base = radial_frequencies(&cfg.trap, &cfg.drive, &cfg.ion).unwrap();
    let v2 = RfDrive {
        voltage: 2.0 * cfg.drive.voltage,
        ..cfg.drive
    };
    let f2 = RfDrive {
        frequency_mhz: 2.0 * cfg.drive.frequency_mhz,
        ..cfg.drive
    };
    let sv = radial_frequencies(&cfg.trap, &v2, &cfg.ion).unwrap();
    let sf = radial_frequencies(&cfg.trap, &f2, &cfg.ion).unwrap();
    let scale_err = [
        (sv.omega_x / base.omega_x / 2.0 - 1.0).abs(),
        (sv.omega_y / base.omega_y / 2.0 - 1.0).abs(),
        (sf.omega_x / base.omega_x * 2.0 - 1.0).abs(),
        (sf.omega_y / base.omega_y * 2.0 - 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let ratio = base.omega_y / base.omega_x;
    let widths: Vec<f64> = (0..=18).map(|i| 20.0 + 10.0 * i as f64).collect();
    let ws = sweep_trap(
        &cfg.trap,
        &cfg.drive,
        &cfg.ion,
        SweepParameter::ApertureWidth,
        &widths,
    )
    .unwrap();
    let decreasing = ws.windows(2).all(|w| w[1].omega_y_norm < w[0].omega_y_norm);
    let lengths: Vec<f64> = (0..=22).map(|i| 50.0 + 25.0 * i as f64).collect();
    let ls = sweep_trap(
        &cfg.trap,
        &cfg.drive,
        &cfg.ion,
        SweepParameter::ApertureLength,
        &lengths,
    )
    .unwrap();
    let (lo, hi) = ls.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), p| {
        (lo.min(p.omega_y), hi.max(p.omega_y))
    });
    let variation = (hi - lo) / hi;
    let null = solve_rf_null(&cfg.trap, &cfg.drive).unwrap();
    let (gx, gy) = grid_null(&cfg);
    let null_err = (null.null_x - gx).hypot(null.height - gy);
    let pass = scale_err < 1e-9
        && (ratio / reference::FREQUENCY_RATIO - 1.0).abs() <= 0.15
        && decreasing
        && variation < 0.05
        && null_err < 0.5;
    let height_band = (base.height / reference::TRAP_HEIGHT_UM - 1.0).abs() <= 0.4;
    outcome(
        pass,
        format!(
            "scaling err {scale_err:.1e}; ωy/ωx = {ratio:.3}; ωy_norm decreasing on [20,200]: {decreasing}; \
             ωy variation over L = {variation:.2e}; |Newton − grid| = {null_err:.3} µm; \
             [reported] h = {:.1} µm (±40% band of {}: {height_band}), ωx = {:.3} MHz, ωy = {:.3} MHz",
            base.height,
            reference::TRAP_HEIGHT_UM,
            base.omega_x,
            base.omega_y
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig::default();
    let cal = app::calibrated_stack(&cfg).unwrap();
    let widths: Vec<f64> = (0..=28).map(|i| 20.0 + 10.0 * i as f64).collect();
    let pts = app::collection_sweep(&cfg, &cal, SweepParameter::ApertureWidth, &widths).unwrap();
    let (k, _) = pts
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (k, p)| {
            if p.efficiency > a.1 {
                (k, p.efficiency)
            } else {
                a
            }
        });
    let w = pts[k].value;
    let interior = k > 0 && k + 1 < pts.len();
    outcome(
        interior && (80.0..=250.0).contains(&w),
        format!(
            "collection maximum {:.3}% at w = {w} µm (interior: {interior}; reference {} µm)",
            100.0 * pts[k].efficiency,
            reference::OPTIMAL_WIDTH_UM
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = RunConfig::default();
    let cal = app::calibrated_stack(&cfg).unwrap();
    let profile = collimation_phase(
        &cfg.layers,
        cfg.lens.diameter_um,
        cfg.lens.wavelength_nm,
        cfg.lens.radial_samples,
    )
    .unwrap();
    let psf = app::run_psf(&cfg, &profile, &cal.stack, false).unwrap();
    let fine = app::run_psf(&cfg, &profile, &cal.stack, true).unwrap();
    let m = psf.metrics;
    let ratio = m.fwhm_x / m.fwhm_z;
    let power = psf.max_power_error().max(fine.max_power_error());
    let change = (fine.metrics.fwhm_x / m.fwhm_x - 1.0)
        .abs()
        .max((fine.metrics.fwhm_z / m.fwhm_z - 1.0).abs());
    let pass = (m.fwhm_z / reference::FWHM_Z_UM - 1.0).abs() <= 0.15
        && ratio > 1.2
        && power <= 1e-6
        && change < 0.02;
    outcome(
        pass,
        format!(
            "fwhm_z = {:.3} µm (ref {} ± 15%); fwhm_x = {:.3} µm, ratio {ratio:.3} (> 1.2); \
             power error {power:.1e}; grid doubling change {:.2}%",
            m.fwhm_z,
            reference::FWHM_Z_UM,
            m.fwhm_x,
            100.0 * change
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = RunConfig::default();
    let b = app::budget(&cfg).unwrap();
    let p = b.predicted_detection_pct;
    let pass = (p - reference::PREDICTED_DETECTION_PCT).abs() <= 0.05
        && (p - b.measured_detection_pct).abs() < 0.10;
    outcome(
        pass,
        format!(
            "T = {}, predicted {p:.4}% ± {:.4} (ref {}% ± 0.05), measured {}%",
            b.total_transmittance,
            b.predicted_stderr_pct,
            reference::PREDICTED_DETECTION_PCT,
            b.measured_detection_pct
        ),
    )
}

fn crossing(c: &EfficiencyCurve, level: f64) -> f64 {
    c.falloff(level).unwrap_or(f64::NAN)
}

fn criterion_8() -> Outcome {
    let cfg = RunConfig::default();
    assert_eq!(cfg.sweep.rays_per_point, 1_000_000);
    let cal = app::calibrated_stack(&cfg).unwrap();
    let s = app::lateral_scans(&cfg, &cal.stack).unwrap();
    let o90 = crossing(&s.objective, 0.9);
    let i90 = crossing(&s.integrated, 0.9);
    let knee = crossing(&s.integrated, 0.5);
    let imax = s.integrated.max();
    let held = s
        .integrated
        .points
        .iter()
        .filter(|p| p.displacement <= 10.0)
        .all(|p| p.efficiency_pct >= 0.9 * imax);
    let pass = (o90 - reference::OBJECTIVE_FALLOFF_MM).abs() <= 0.15
        && held
        && (knee - reference::FOCUSING_RADIUS_MM).abs() <= 1.0
        && i90 / o90 > 10.0;
    outcome(
        pass,
        format!(
            "objective 90% falloff {o90:.3} mm (ref {} ± 0.15); integrated ≥ 90% to 10 mm: {held}; \
             knee (50%) {knee:.3} mm (ref {} ± 1); falloff ratio {:.1} (> 10)",
            reference::OBJECTIVE_FALLOFF_MM,
            reference::FOCUSING_RADIUS_MM,
            i90 / o90
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = RunConfig::default();
    let cal = app::calibrated_stack(&cfg).unwrap();
    let s = app::axial_scans(&cfg, &cal.stack).unwrap();
    let asym = |c: &EfficiencyCurve| {
        let mut worst: f64 = 0.0;
        for p in &c.points {
            let m = c
                .points
                .iter()
                .find(|q| (q.displacement + p.displacement).abs() < 1e-9)
                .unwrap();
            let se = p.stderr_pct.hypot(m.stderr_pct);
            let d = (p.efficiency_pct - m.efficiency_pct).abs();
            if d > 0.0 {
                worst = worst.max(if se > 0.0 { d / se } else { f64::INFINITY });
            }
        }
        worst
    };
    let (ao, ai) = (asym(&s.objective), asym(&s.integrated));
    let at0 = |c: &EfficiencyCurve| c.value_at(0.0).unwrap().efficiency_pct;
    let (o0, i0) = (at0(&s.objective), at0(&s.integrated));
    let ordered = s
        .objective
        .points
        .iter()
        .zip(&s.integrated.points)
        .filter(|(p, _)| p.displacement.abs() >= 25.0)
        .all(|(p, q)| q.efficiency_pct / i0 <= p.efficiency_pct / o0 + 1e-12);
    outcome(
        ao < 3.0 && ai < 3.0 && ordered,
        format!(
            "asymmetry objective {ao:.2} σ, integrated {ai:.2} σ (< 3); \
             integrated ≤ objective (normalised) at |d′| ≥ 25 µm: {ordered}"
        ),
    )
}

fn run_target(target: &str, out: &std::path::Path, threads: usize) -> BTreeMap<String, String> {
    let cli = Cli::try_parse_from([
        "trapscope",
        "reproduce",
        target,
        "--out",
        out.to_str().unwrap(),
        "--threads",
        &threads.to_string(),
    ])
    .unwrap();
    assert_eq!(app::run(&cli), 0, "target {target} failed");
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            (
                f["path"].as_str().unwrap().to_owned(),
                f["sha256"].as_str().unwrap().to_owned(),
            )
        })
        .collect()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut n_files = 0;
    for target in ["fig2c", "fig2d", "fig4d", "budget"] {
        let a = run_target(target, &dir.path().join(format!("{target}_1")), 1);
        let b = run_target(target, &dir.path().join(format!("{target}_4")), 4);
        for (path, hash) in &a {
            let other = std::fs::read(dir.path().join(format!("{target}_4")).join(path)).unwrap();
            let mine = std::fs::read(dir.path().join(format!("{target}_1")).join(path)).unwrap();
            identical &= other == mine && b.get(path) == Some(hash);
            n_files += 1;
        }
        identical &= a.len() == b.len();
    }
    outcome(
        identical,
        format!(
            "{n_files} output files byte-identical across reruns with 1 and 4 threads: {identical}"
        ),
    )
}

fn main() {
    type Criterion = (u32, &'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "no-undercut collection", 1.0, criterion_1),
        (2, "quadrature vs Monte Carlo", 30.0, criterion_2),
        (3, "undercut calibration", 10.0, criterion_3),
        (4, "trap model properties", 60.0, criterion_4),
        (5, "coupled width sweep", 120.0, criterion_5),
        (6, "focal spot", 120.0, criterion_6),
        (7, "detection budget", 10.0, criterion_7),
        (8, "lateral field of view", 120.0, criterion_8),
        (9, "axial scans", 120.0, criterion_9),
        (10, "determinism", f64::INFINITY, criterion_10),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        let secs = t0.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit;
        if !pass {
            failed += 1;
        }
        let limit_txt = if limit.is_finite() {
            format!(" / limit {limit} s")
        } else {
            String::new()
        };
        println!(
            "criterion {id:>2} {} {name}: {} [{secs:.2} s{limit_txt}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

use num_complex::Complex64;
use proptest::prelude::*;
use trapscope::collection_geometry::{ApertureStack, RectOpening};
use trapscope::metalens_design::{collimation_phase, Layer, LayerStack};
use trapscope::wave_optics::{
    angular_spectrum_propagate, fwhm, simulate_psf, ComplexField2D, GridSpec, POWER_TOL,
};

fn small_psf() -> trapscope::wave_optics::PsfResult {
    let stack = LayerStack {
        layers: vec![Layer::new("vac", 60.0, 1.0), Layer::new("glass", 40.0, 1.5)],
    };
    let profile = collimation_phase(&stack, 50.0, 397.0, 1000).unwrap();
    let openings = ApertureStack {
        openings: vec![RectOpening::centered(0.0, 12.0, 20.0)],
        source_height: 30.0,
        substrate_thickness: 0.0,
    };
    let grid = GridSpec {
        n: 1024,
        dx: 0.1,
        border: 64,
    };
    simulate_psf(&profile, &stack, &openings, 397.0, grid).unwrap()
}

#[test]
fn symmetric_system_gives_even_psf() {
    let psf = small_psf();
    let n = psf.field.n;
    let i = psf.field.intensity();
    let peak = i.iter().cloned().fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for ix in 1..n {
        for iz in 1..n {
            let a = i[ix * n + iz];
            worst = worst
                .max((a - i[(n - ix) * n + iz]).abs())
                .max((a - i[ix * n + (n - iz)]).abs());
        }
    }
    assert!(worst / peak < 1e-6, "asymmetry {}", worst / peak);
    assert!(psf.max_power_error() < POWER_TOL);
}

#[test]
fn reported_widths_match_cuts() {
    let psf = small_psf();
    let dx = psf.field.dx;
    assert!((fwhm(&psf.cut_z(), dx).unwrap() - psf.metrics.fwhm_z).abs() < 1e-12);
    assert!((fwhm(&psf.cut_x(), dx).unwrap() - psf.metrics.fwhm_x).abs() < 1e-12);
    assert!(psf.metrics.encircled_fraction > 0.0 && psf.metrics.encircled_fraction <= 1.0);
}

fn gaussian(n: usize, dx: f64, w0: f64, x0: f64) -> ComplexField2D {
    ComplexField2D::from_fn(n, dx, |x, z| {
        Complex64::new((-((x - x0).powi(2) + z * z) / (w0 * w0)).exp(), 0.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn propagation_conserves_power(w0 in 1.0f64..3.0, d in -40.0f64..40.0, index in 1.0f64..2.0) {
        let mut f = gaussian(256, 0.1, w0, 0.0);
        let p0 = f.power();
        let r = angular_spectrum_propagate(&mut f, d, index, 0.397).unwrap();
        prop_assert!(r.relative_error < POWER_TOL);
        prop_assert!((f.power() / p0 - 1.0).abs() < POWER_TOL);
    }

    #[test]
    fn propagation_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, d in 1.0f64..20.0) {
        let (n, dx) = (128, 0.1);
        let mut f = gaussian(n, dx, 1.5, -1.0);
        let mut g = gaussian(n, dx, 1.0, 1.5);
        let mut h = ComplexField2D::from_fn(n, dx, |_, _| Complex64::new(0.0, 0.0));
        for k in 0..n * n {
            h.data[k] = a * f.data[k] + b * g.data[k];
        }
        angular_spectrum_propagate(&mut f, d, 1.0, 0.397).unwrap();
        angular_spectrum_propagate(&mut g, d, 1.0, 0.397).unwrap();
        angular_spectrum_propagate(&mut h, d, 1.0, 0.397).unwrap();
        let err = (0..n * n)
            .map(|k| (h.data[k] - a * f.data[k] - b * g.data[k]).norm())
            .fold(0.0, f64::max);
        prop_assert!(err < 1e-10);
    }
}

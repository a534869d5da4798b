use proptest::prelude::*;
use trapscope::trap_model::{
    radial_frequencies, rect_potential, solve_rf_null, total_potential, ElectrodeRect, IonSpecies,
    RfDrive, TrapLayout,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frequencies_linear_in_voltage(v in 5.0f64..400.0) {
        let layout = TrapLayout::default();
        let ion = IonSpecies::default();
        let base = radial_frequencies(&layout, &RfDrive::default(), &ion).unwrap();
        let d = RfDrive { voltage: v, ..RfDrive::default() };
        let s = radial_frequencies(&layout, &d, &ion).unwrap();
        let k = v / RfDrive::default().voltage;
        prop_assert!((s.omega_x / base.omega_x / k - 1.0).abs() < 1e-9);
        prop_assert!((s.omega_y / base.omega_y / k - 1.0).abs() < 1e-9);
        prop_assert!((s.height - base.height).abs() < 1e-9);
    }

    /// Lengths × s: the null moves to s·h and ω scales as 1/s².
    #[test]
    fn geometric_scaling(s in 0.5f64..3.0) {
        let layout = TrapLayout::default();
        let drive = RfDrive::default();
        let ion = IonSpecies::default();
        let a = radial_frequencies(&layout, &drive, &ion).unwrap();
        let b = radial_frequencies(&layout.scaled(s), &drive, &ion).unwrap();
        prop_assert!((b.height / (s * a.height) - 1.0).abs() < 1e-6);
        prop_assert!((b.omega_y * s * s / a.omega_y - 1.0).abs() < 1e-4);
    }

    #[test]
    fn null_is_a_field_zero(w in 0.0f64..250.0, l in 20.0f64..600.0) {
        let layout = TrapLayout { aperture_width: w, aperture_length: l, ..TrapLayout::default() };
        let drive = RfDrive::default();
        let sol = solve_rf_null(&layout, &drive).unwrap();
        let rects = layout.electrodes(&drive);
        let at = total_potential(&rects, [sol.null_x, sol.height, 0.0]).unwrap().field_sq();
        let off = total_potential(&rects, [sol.null_x, sol.height + 1.0, 0.0]).unwrap().field_sq();
        prop_assert!(at < 1e-8 * off, "|E|² at null {} vs 1 µm above {}", at, off);
    }

    /// Far above a finite electrode the potential approaches the dipole
    /// limit A·area·y/(2π r³).
    #[test]
    fn far_field_limit(x in -50.0f64..50.0, z in -50.0f64..50.0) {
        let r = ElectrodeRect::rf(-1.0, 1.0, -1.0, 1.0, 1.0);
        let p = [x, 1.0e4, z];
        let d = (x * x + 1.0e8 + z * z).sqrt();
        let dipole = 4.0 * 1.0e4 / (2.0 * std::f64::consts::PI * d.powi(3));
        let v = rect_potential(&r, p).unwrap().potential;
        prop_assert!((v / dipole - 1.0).abs() < 1e-6);
    }
}

#[test]
fn infinite_plane_gives_full_amplitude() {
    let r = ElectrodeRect::rf(-1e7, 1e7, -1e7, 1e7, 3.0);
    let v = rect_potential(&r, [0.0, 10.0, 0.0]).unwrap().potential;
    assert!((v - 3.0).abs() < 1e-5);
}

#[test]
fn nominal_height_within_model_band() {
    let s = solve_rf_null(&TrapLayout::default(), &RfDrive::default()).unwrap();
    assert!((s.height / 125.0 - 1.0).abs() <= 0.4, "h = {}", s.height);
}

use proptest::prelude::*;
use std::f64::consts::TAU;
use trapscope::metalens_design::{
    collimation_phase, featuremap_phase, fit_even_zernike, phase_to_featuremap, wrapped_diff,
    Layer, LayerStack, PillarLibrary, GLASS_INDEX_397,
};

/// Minimum optical path from the on-axis source to lens radius `r` through
/// the default stack, by dense scan over the vacuum/glass crossing radius.
fn fermat_scan(r: f64) -> f64 {
    let (a, b, n) = (400.0, 200.0, GLASS_INDEX_397);
    let opl = |rho: f64| (rho * rho + a * a).sqrt() + n * ((r - rho).powi(2) + b * b).sqrt();
    let steps = 2_000_000;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=steps {
        let rho = r * i as f64 / steps as f64;
        let v = opl(rho);
        if v < best.0 {
            best = (v, rho);
        }
    }
    // golden-section polish inside the bracketing cell
    let h = r / steps as f64;
    let (mut lo, mut hi) = ((best.1 - h).max(0.0), (best.1 + h).min(r));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = hi - g * (hi - lo);
        let d = lo + g * (hi - lo);
        if opl(c) < opl(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    opl(0.5 * (lo + hi))
}

#[test]
fn edge_phase_matches_fermat_scan() {
    let p = collimation_phase(&LayerStack::default(), 300.0, 397.0, 301).unwrap();
    let k = TAU / 0.397;
    let opl0 = 400.0 + GLASS_INDEX_397 * 200.0;
    for (i, r) in [(150, 75.0), (300, 150.0)] {
        let expected = k * (opl0 - fermat_scan(r));
        assert!(
            (p.phase[i] - expected).abs() < 1e-3,
            "r = {r}: {} vs {expected}",
            p.phase[i]
        );
    }
}

#[test]
fn fit_residual_small_and_non_increasing() {
    let p = collimation_phase(&LayerStack::default(), 300.0, 397.0, 1501).unwrap();
    let res: Vec<f64> = (2..=6)
        .map(|k| fit_even_zernike(&p, k).unwrap().max_residual)
        .collect();
    assert!(res[2] < 0.05, "K = 4 residual {}", res[2]);
    for w in res.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{res:?}");
    }
}

#[test]
fn compiled_map_within_quantization() {
    let lib = PillarLibrary::synthetic();
    let p = collimation_phase(&LayerStack::default(), 60.0, 397.0, 601).unwrap();
    let map = phase_to_featuremap(&p, &lib).unwrap();
    let step = lib.quantization_step();
    assert!(map.mean_abs_residual() < 0.5 * step);
    let lens = featuremap_phase(&map, &lib).unwrap();
    let n = map.n;
    for ix in 0..n {
        for iz in 0..n {
            let k = ix * n + iz;
            let Some(_) = map.diameters[k] else { continue };
            let (x, z) = map.site_position_nm(ix, iz);
            let target = p.phase_at(1e-3 * x.hypot(z)).unwrap();
            assert!(wrapped_diff(target, lens.phase[k]).abs() <= step);
            // mirrored sites
            assert_eq!(map.diameters[k], map.diameters[(n - 1 - ix) * n + iz]);
            assert_eq!(map.diameters[k], map.diameters[ix * n + (n - 1 - iz)]);
            assert_eq!(map.diameters[k], map.diameters[iz * n + ix]);
        }
    }
}

#[test]
fn feature_map_csv_header_and_rows() {
    let lib = PillarLibrary::synthetic();
    let p = collimation_phase(&LayerStack::default(), 2.0, 397.0, 11).unwrap();
    let map = phase_to_featuremap(&p, &lib).unwrap();
    let mut buf = Vec::new();
    map.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ix,iz,x_nm,z_nm,diameter_nm"));
    assert_eq!(lines.count(), map.diameters.iter().flatten().count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vacuum_stack_is_hyperbolic(f in 50.0f64..2000.0, d in 10.0f64..600.0) {
        let stack = LayerStack { layers: vec![Layer::new("a", 0.3 * f, 1.0), Layer::new("b", 0.7 * f, 1.0)] };
        let p = collimation_phase(&stack, d, 397.0, 41).unwrap();
        let k = TAU / 0.397;
        for (r, ph) in p.radii().zip(&p.phase) {
            let e = -k * ((r * r + f * f).sqrt() - f);
            prop_assert!((ph - e).abs() < 1e-8 * e.abs().max(1.0));
        }
    }

    #[test]
    fn phase_decreasing_for_any_glass(t in 10.0f64..500.0, n in 1.0f64..2.5) {
        let stack = LayerStack { layers: vec![Layer::new("vac", 300.0, 1.0), Layer::new("glass", t, n)] };
        let p = collimation_phase(&stack, 300.0, 397.0, 101).unwrap();
        prop_assert!(p.phase.windows(2).all(|w| w[1] < w[0]));
    }
}

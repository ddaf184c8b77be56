use std::sync::Arc;

use nudich::builtin::example;
use nudich::spectrum::{default_gamma_range, spectral_filtration, Verdict};
use nudich::{build_evolution, scan_spectrum, DichotomyTester, SpectrumConfig, SpectrumResult, SystemSpec};

fn scan(system: SystemSpec, range: Option<(f64, f64)>) -> SpectrumResult {
    let ev = build_evolution(Arc::new(system), (-20.0, 20.0), 1e-10).unwrap();
    let tester = DichotomyTester::new(&ev, &SpectrumConfig::default()).unwrap();
    let (lo, hi) = range.unwrap_or_else(|| default_gamma_range(&ev).unwrap());
    scan_spectrum(&tester, lo, hi, 0.05).unwrap()
}

fn assert_brackets(spec: &SpectrumResult, centers: &[f64], slack: f64) {
    assert_eq!(spec.intervals.len(), centers.len(), "{:?}", spec.intervals);
    for (iv, c) in spec.intervals.iter().zip(centers) {
        assert!(iv.lo - slack <= *c && *c <= iv.hi + slack, "{iv:?} misses {c}");
        assert!(iv.width() <= 2.0 * slack, "{iv:?} wider than {}", 2.0 * slack);
    }
}

#[test]
fn diagonal_rates_are_point_spectra() {
    let spec = scan(SystemSpec::diagonal("d", &[-1.0, 2.0]), None);
    assert_brackets(&spec, &[-1.0, 2.0], 0.05);
    assert_eq!(spec.manifold_dims, vec![0, 1, 1, 0]);
    assert!(spec.is_bounded());
    assert!(spec.max_nonuniformity() < 0.02);
}

#[test]
fn three_rates_give_a_full_filtration() {
    let spec = scan(example("diag3").unwrap().system().unwrap(), Some((-3.0, 2.0)));
    assert_brackets(&spec, &[-2.0, 0.0, 1.0], 0.05);
    assert_eq!(spec.manifold_dims, vec![0, 1, 1, 1, 0]);
    let f = spectral_filtration(&spec, 1e-3).unwrap();
    assert!((f.whitney_condition - 1.0).abs() < 1e-6);
}

#[test]
fn periodic_rate_widens_to_its_mean_band() {
    // Mean rate −1; the bounded oscillation only spreads finite-window growth.
    let spec = scan(example("scalar-osc").unwrap().system().unwrap(), Some((-2.5, 0.5)));
    assert_eq!(spec.intervals.len(), 1);
    let iv = spec.intervals[0];
    assert!(iv.contains(-1.0), "{iv:?}");
    assert!(iv.lo > -1.5 && iv.hi < -0.5, "{iv:?}");
}

#[test]
fn growing_oscillation_is_nonuniform() {
    let spec = scan(example("barreira-valls").unwrap().system().unwrap(), None);
    assert_eq!(spec.intervals.len(), 2);
    assert!(spec.intervals[0].hi < 0.0 && spec.intervals[1].lo > 0.0);
    assert!(spec.max_nonuniformity() > 0.02);
    let mid = spec.points.iter().find(|p| p.gamma.abs() < 0.3 && p.verdict == Verdict::Accepted);
    assert!(mid.is_some());
}

#[test]
fn coupled_triangular_keeps_diagonal_rates() {
    let spec = scan(example("triangular").unwrap().system().unwrap(), None);
    assert_brackets(&spec, &[-1.0, 2.0], 0.05);
}

#[test]
fn rotation_has_a_single_zero_interval() {
    let spec = scan(example("rotation").unwrap().system().unwrap(), Some((-1.0, 1.0)));
    assert_eq!(spec.intervals.len(), 1);
    assert!(spec.intervals[0].contains(0.0));
}

//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nudich::builtin::example;
use nudich::documents::{normal_form_document, reduction_document, spectrum_document};
use nudich::evolution::diagnostics;
use nudich::linalg::spectral_norm;
use nudich::normalform::{default_residual_check, normal_form, Side};
use nudich::poly::Poly;
use nudich::polyops::{
    block_coordinates, enumerate_basis, evolution_factorization, homological_operator, kronecker, kronecker_det, lift_matrix,
};
use nudich::report::{to_json, RunManifest, Tolerances};
use nudich::spectrum::constraints_hold;
use nudich::*;

// Pinned tolerances.
const COCYCLE_FACTOR: f64 = 100.0;
const LIOUVILLE_TOL: f64 = 1e-6;
const GAMMA_TOL: f64 = 0.05;
const MIN_NONUNIFORMITY: f64 = 0.02;
const UNIFORM_RESIDUAL_RATIO: f64 = 2.0;
const IDENTITY_TOL: f64 = 1e-9;
const FACTORIZATION_TOL: f64 = 1e-6;
const COUPLING_TOL: f64 = 1e-4;
const S_NORM_BOUND: f64 = std::f64::consts::SQRT_2 + 1e-6;
const SIMILARITY_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-8;
const SLOPE_MARGIN: f64 = 0.2;

fn report(n: u32, what: &str, ok: bool, detail: String) {
    println!("criterion {n}: {} ({what}) {detail}", if ok { "PASS" } else { "FAIL" });
}

fn system(name: &str) -> Arc<SystemSpec> {
    Arc::new(example(name).unwrap().system().unwrap())
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[test]
fn cocycle_and_liouville() {
    let start = Instant::now();
    let tol = 1e-10;
    let mut worst_cocycle = 0.0f64;
    let mut worst_liouville = 0.0f64;
    for name in ["barreira-valls", "diag-1-2", "triangular", "scalar-osc", "rotation"] {
        let ev = build_evolution(system(name), (-20.0, 20.0), tol).unwrap();
        let d = diagnostics(&ev, 50, 7).unwrap();
        worst_cocycle = worst_cocycle.max(d.cocycle_defect);
        worst_liouville = worst_liouville.max(d.liouville_defect);
    }
    let elapsed = start.elapsed();
    let ok = worst_cocycle <= COCYCLE_FACTOR * tol && worst_liouville <= LIOUVILLE_TOL && elapsed < Duration::from_secs(10);
    report(1, "cocycle and Liouville", ok, format!("cocycle {worst_cocycle:.2e}, Liouville {worst_liouville:.2e}, {elapsed:.2?}"));
    assert!(ok);
}

#[test]
fn constant_coefficient_spectrum() {
    let start = Instant::now();
    let sys = Arc::new(SystemSpec::diagonal("diag", &[-1.0, 2.0]));
    let an = analyze(sys, &PipelineOptions::default()).unwrap();
    let s = &an.spectrum;
    let elapsed = start.elapsed();
    let ok = s.intervals.len() == 2
        && s.intervals.iter().all(|iv| iv.width() <= 2.0 * GAMMA_TOL)
        && s.intervals[0].contains(-1.0)
        && s.intervals[1].contains(2.0)
        && s.manifold_dims[1] == 1
        && s.manifold_dims[2] == 1
        && elapsed < Duration::from_secs(30);
    report(2, "constant-coefficient spectrum", ok, format!("{:?} dims {:?}, {elapsed:.2?}", s.intervals, s.manifold_dims));
    assert!(ok);
}

#[test]
fn nonuniform_detection() {
    let ev = build_evolution(system("barreira-valls"), (-20.0, 20.0), 1e-10).unwrap();
    let tester = DichotomyTester::new(&ev, &SpectrumConfig::default()).unwrap();
    let e = tester.estimate(0.0).unwrap();
    let f = &e.fit;
    let combined = |a: f64, b: f64| ((a * a + b * b) / 2.0).sqrt();
    let residual = combined(f.stable_residual, f.unstable_residual);
    let uniform = combined(f.uniform_stable_residual, f.uniform_unstable_residual);
    let ok = e.accepted
        && f.mu > MIN_NONUNIFORMITY
        && f.alpha + f.mu < 0.0
        && f.beta - f.nu > 0.0
        && f.mu.max(f.nu) <= (-f.alpha).min(f.beta)
        && constraints_hold(f)
        && uniform >= UNIFORM_RESIDUAL_RATIO * residual;
    report(
        3,
        "nonuniform detection",
        ok,
        format!("α {:.4} β {:.4} μ {:.4} ν {:.4}, residual {residual:.4} vs uniform {uniform:.4}", f.alpha, f.beta, f.mu, f.nu),
    );
    assert!(ok);
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rng.gen_range(-1.0..1.0) + if i == j { shift } else { 0.0 })
}

#[test]
fn kronecker_and_lift_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |key: &'static str, v: f64| {
        let e = worst.entry(key).or_insert(0.0);
        *e = e.max(v);
    };
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let a = random_matrix(&mut rng, n, 2.0);
        let b = random_matrix(&mut rng, n, 2.0);
        let nab = lift_matrix(&(&a * &b), k).unwrap();
        let na = lift_matrix(&a, k).unwrap();
        let nb = lift_matrix(&b, k).unwrap();
        bump("lift of product", rel(&(&nb * &na), &nab));
        let n_inv = lift_matrix(&a.clone().try_inverse().unwrap(), k).unwrap();
        bump("lift of inverse", rel(&na.clone().try_inverse().unwrap(), &n_inv));

        let (p, q) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let a1 = random_matrix(&mut rng, p, 0.0);
        let c1 = random_matrix(&mut rng, p, 0.0);
        let b1 = random_matrix(&mut rng, q, 0.0);
        let d1 = random_matrix(&mut rng, q, 0.0);
        let lhs = kronecker(&a1, &b1).unwrap() * kronecker(&c1, &d1).unwrap();
        bump("mixed product", rel(&lhs, &kronecker(&(&a1 * &c1), &(&b1 * &d1)).unwrap()));
        let nk = spectral_norm(&kronecker(&a1, &b1).unwrap());
        let prod = spectral_norm(&a1) * spectral_norm(&b1);
        bump("norm multiplicativity", (nk - prod).abs() / prod);
        let brute = kronecker(&a1, &b1).unwrap().determinant();
        let closed = kronecker_det(&a1, &b1);
        bump("determinant", (brute - closed).abs() / brute.abs().max(closed.abs()).max(1e-300));
    }
    let elapsed = start.elapsed();
    let ok = worst.values().all(|&v| v <= IDENTITY_TOL) && elapsed < Duration::from_secs(20);
    report(4, "Kronecker and lift identities", ok, format!(
        "{}, {elapsed:.2?}",
        worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")
    ));
    assert!(ok);
}

#[test]
fn factorization_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let mut sizes = Vec::new();
        let mut left = n;
        while left > 0 {
            let s = rng.gen_range(1..=left);
            sizes.push(s);
            left -= s;
        }
        let blocks: Vec<DMatrix<f64>> = sizes.iter().map(|&s| random_matrix(&mut rng, s, 0.0)).collect();
        let a = nudich::linalg::block_diag(&blocks);
        let ev = build_evolution(Arc::new(SystemSpec::constant("a", &a)), (0.0, 2.0), 1e-12).unwrap();
        let l = homological_operator(&a, k).unwrap();
        let basis = enumerate_basis(n, k).unwrap();
        let taus = enumerate_basis(sizes.len(), k).unwrap();
        let (t, s) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
        for tau in &taus.indices {
            for j in 0..sizes.len() {
                let idx = block_coordinates(&basis, &sizes, tau, j);
                if idx.is_empty() {
                    continue;
                }
                let lb = DMatrix::from_fn(idx.len(), idx.len(), |r, c| l[(idx[r], idx[c])]);
                let direct = build_evolution(Arc::new(SystemSpec::constant("l", &lb)), (0.0, 2.0), 1e-12).unwrap();
                let want = direct.propagate(t, s).unwrap();
                let got = evolution_factorization(&ev, &sizes, k, tau, j, t, s).unwrap();
                worst = worst.max((&got - &want).amax() / want.amax().max(1.0));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= FACTORIZATION_TOL && elapsed < Duration::from_secs(60);
    report(5, "factorization oracle", ok, format!("max defect {worst:.2e}, {elapsed:.2?}"));
    assert!(ok);
}

#[test]
fn reduction_fidelity() {
    let opts = PipelineOptions::default();
    let an = analyze(system("triangular"), &opts).unwrap();
    let bs = reduce(&an, &opts).unwrap();
    let d = &bs.diagnostics;
    let s_max = bs.transform.s.iter().map(spectral_norm).fold(0.0, f64::max);
    let points = [-1.0, 2.0];
    let spectra_ok = bs.blocks.len() == 2
        && bs.blocks.iter().zip(points).all(|(b, p)| {
            let ivs = &b.spectrum.as_ref().unwrap().intervals;
            ivs.len() == 1 && (ivs[0].lo - p).abs() <= 2.0 * GAMMA_TOL && (ivs[0].hi - p).abs() <= 2.0 * GAMMA_TOL
        });
    let ok = d.coupling < COUPLING_TOL && s_max <= S_NORM_BOUND && d.similarity_defect <= SIMILARITY_TOL && spectra_ok;
    report(
        6,
        "reduction fidelity",
        ok,
        format!("coupling {:.2e}, max ‖S‖ {s_max:.8}, similarity {:.2e}, block spectra ok {spectra_ok}", d.coupling, d.similarity_defect),
    );
    assert!(ok);
}

/// Classical normal form of `y' = Λy + f(y)` for diagonal Λ, degree by degree.
struct ClassicalOracle {
    h: Vec<Vec<Poly>>,
    g: Vec<Vec<Poly>>,
}

fn classical_oracle(lambda: &[f64], f: &[Poly], max_degree: u32) -> ClassicalOracle {
    let n = lambda.len();
    let mut h: Vec<Vec<Poly>> = Vec::new();
    let mut g: Vec<Vec<Poly>> = Vec::new();
    for k in 2..=max_degree {
        // z = y + Σ h_r
        let mut z: Vec<Poly> = (0..n).map(|i| Poly::var(n, i)).collect();
        for hr in &h {
            for (zi, hi) in z.iter_mut().zip(hr) {
                *zi = &*zi + hi;
            }
        }
        let mut fk: Vec<Poly> = f.iter().map(|fi| fi.compose_truncated(&z, k).homogeneous(k)).collect();
        for (ri, hr) in h.iter().enumerate() {
            let r = ri as u32 + 2;
            let s = k + 1 - r;
            if s < 2 {
                continue;
            }
            let gs = &g[(s - 2) as usize];
            for (c, fc) in fk.iter_mut().enumerate() {
                for (v, gv) in gs.iter().enumerate() {
                    let term = (&hr[c].derivative(v) * gv).homogeneous(k);
                    *fc = &*fc - &term;
                }
            }
        }
        let mut hk = vec![Poly::zero(n); n];
        let mut gk = vec![Poly::zero(n); n];
        for (j, fj) in fk.iter().enumerate() {
            for (m, v) in &fj.terms {
                let weight: f64 = m.iter().zip(lambda).map(|(&e, l)| e as f64 * l).sum();
                let d = weight - lambda[j];
                if d.abs() < 1e-9 {
                    gk[j].add_term(m.clone(), *v);
                } else {
                    hk[j].add_term(m.clone(), v / d);
                }
            }
        }
        h.push(hk);
        g.push(gk);
    }
    ClassicalOracle { h, g }
}

fn diagonal_system_with(lambda: &[f64], f: &[Poly]) -> SystemSpec {
    let mut s = SystemSpec::diagonal("oracle", lambda);
    for (j, fj) in f.iter().enumerate() {
        for (m, v) in &fj.terms {
            s.nonlinearity.push(Term { l: m.clone(), j, coeff: TimeExpression::constant(*v) });
        }
    }
    s
}

#[test]
fn normal_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = PipelineOptions { window: (-40.0, 40.0), ..Default::default() };
    let mut worst = 0.0f64;
    let mut worst_s = 0.0f64;
    let mut resonant_terms = 0usize;
    for _ in 0..10 {
        let n = rng.gen_range(2..=3);
        let mut lambda: Vec<f64> = Vec::new();
        while lambda.len() < n {
            let l = rng.gen_range(-3..=3) as f64;
            if !lambda.contains(&l) {
                lambda.push(l);
            }
        }
        lambda.sort_by(f64::total_cmp);
        let degree = 3;
        let f: Vec<Poly> = (0..n)
            .map(|_| {
                let mut p = Poly::zero(n);
                for k in 2..=degree {
                    for m in enumerate_basis(n, k).unwrap().indices {
                        if rng.gen_bool(0.5) {
                            p.add_term(m, rng.gen_range(-1.0..1.0));
                        }
                    }
                }
                p
            })
            .collect();
        let sys = Arc::new(diagonal_system_with(&lambda, &f));
        let an = analyze(sys.clone(), &opts).unwrap();
        let bs = reduce(&an, &opts).unwrap();
        let nf = normal_form(&sys, &bs, &NormalFormConfig { max_degree: degree, ..Default::default() }).unwrap();
        let oracle = classical_oracle(&lambda, &f, degree);
        let i = nf.times.iter().position(|&t| t == 0.0).unwrap();
        worst_s = worst_s.max((&bs.transform.s[i] - DMatrix::<f64>::identity(n, n)).amax());
        for d in &nf.degrees {
            let h = nudich::normalform::to_vecpoly(&d.basis, &d.h.values[i]);
            let g = nudich::normalform::to_vecpoly(&d.basis, &d.g.values[i]);
            let oh = &oracle.h[(d.k - 2) as usize];
            let og = &oracle.g[(d.k - 2) as usize];
            for m in &d.basis.indices {
                for c in 0..n {
                    worst = worst.max((h[c].coeff(m) - oh[c].coeff(m)).abs());
                    worst = worst.max((g[c].coeff(m) - og[c].coeff(m)).abs());
                }
            }
            resonant_terms += og.iter().map(|p| p.terms.len()).sum::<usize>();
        }
    }

    // ẋ = x, ẏ = 2y + x² keeps x² in the second component
    let sys = system("poincare-2d");
    let an = analyze(sys.clone(), &opts).unwrap();
    let bs = reduce(&an, &opts).unwrap();
    let nf = normal_form(&sys, &bs, &NormalFormConfig { max_degree: 2, ..Default::default() }).unwrap();
    let d = nf.degree(2).unwrap();
    let mid = nf.times.len() / 2;
    let g = nudich::normalform::to_vecpoly(&d.basis, &d.g.values[mid]);
    let h = nudich::normalform::to_vecpoly(&d.basis, &d.h.values[mid]);
    let entry = d.table.get(&[2, 0], 1).unwrap();
    let kept = entry.resonant && (g[1].coeff(&[2, 0]) - 1.0).abs() <= ORACLE_TOL && h[1].coeff(&[2, 0]).abs() <= ORACLE_TOL;

    let ok = worst <= ORACLE_TOL && kept && worst_s <= ORACLE_TOL;
    report(
        7,
        "normal-form oracle",
        ok,
        format!("max coefficient error {worst:.2e}, max |S − I| {worst_s:.2e}, {resonant_terms} resonant terms, x² kept {kept}"),
    );
    assert!(ok);
}

#[test]
fn residual_scaling() {
    let opts = PipelineOptions { window: (-40.0, 40.0), ..Default::default() };
    let sys = system("diag-1-2");
    let an = analyze(sys.clone(), &opts).unwrap();
    let bs = reduce(&an, &opts).unwrap();
    let mut slopes = Vec::new();
    let mut ok = true;
    for degree in [2, 3] {
        let nf = normal_form(&sys, &bs, &NormalFormConfig { max_degree: degree, ..Default::default() }).unwrap();
        let r = default_residual_check(&sys, &bs, &nf, 11).unwrap();
        ok &= r.slope >= degree as f64 + 1.0 - SLOPE_MARGIN;
        slopes.push((degree, r.slope));
    }
    report(8, "residual scaling", ok, format!("slopes {slopes:.3?}"));
    assert!(ok);
}

#[test]
fn truncation_stability() {
    let opts = PipelineOptions { window: (-20.0, 20.0), ..Default::default() };
    let sys = system("barreira-valls");
    let an = analyze(sys.clone(), &opts).unwrap();
    let bs = reduce(&an, &opts).unwrap();
    let base = NormalFormConfig { max_degree: 3, tail_tol: 1e-4, ..Default::default() };
    let once = normal_form(&sys, &bs, &base).unwrap();
    let twice = normal_form(&sys, &bs, &NormalFormConfig { t_cut_scale: 2.0, ..base.clone() }).unwrap();
    let sizes = bs.block_sizes();
    let mut compared = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut ok = true;
    for (d1, d2) in once.degrees.iter().zip(&twice.degrees) {
        for (b1, b2) in d1.blocks.iter().zip(&d2.blocks) {
            if b1.resonant {
                continue;
            }
            assert_eq!((&b1.tau, b1.j), (&b2.tau, b2.j));
            let Some([lo, hi]) = b2.valid else { continue };
            let bound = b1.tail_bound.unwrap();
            let idx = block_coordinates(&d1.basis, &sizes, &b1.tau, b1.j);
            for (i, &t) in once.times.iter().enumerate() {
                if t < lo || t > hi {
                    continue;
                }
                let diff = idx.iter().map(|&p| (d1.h.values[i][p] - d2.h.values[i][p]).powi(2)).sum::<f64>().sqrt();
                compared += 1;
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(diff / bound);
                }
                ok &= diff < bound;
            }
        }
    }
    let sides: Vec<Option<Side>> = once.degrees.iter().flat_map(|d| d.blocks.iter().map(|b| b.side)).collect();
    ok &= compared > 0;
    report(
        9,
        "truncation stability",
        ok,
        format!("{compared} block samples, max change / tail bound {worst_ratio:.3e}, {} nonresonant blocks", sides.iter().flatten().count()),
    );
    assert!(ok);
}

#[test]
fn determinism() {
    let opts = PipelineOptions { degree: 2, ..Default::default() };
    let manifest = RunManifest::new("normalform", "example:diag-1-2", opts.window, Tolerances::default(), "out", opts.seed);
    let run = || {
        let sys = system("diag-1-2");
        let an = analyze(sys.clone(), &opts).unwrap();
        let bs = reduce(&an, &opts).unwrap();
        let nf = normalize(&an, &bs, &opts).unwrap();
        let r = default_residual_check(&sys, &bs, &nf, opts.seed).unwrap();
        [
            to_json(&spectrum_document(&manifest, &an.spectrum)),
            to_json(&reduction_document(&manifest, &bs)),
            to_json(&normal_form_document(&manifest, &nf, Some(&r))),
        ]
    };
    let a = run();
    let b = run();
    let ok = a == b;
    report(10, "determinism", ok, format!("{} documents, {} bytes", a.len(), a.iter().map(String::len).sum::<usize>()));
    assert!(ok);
}

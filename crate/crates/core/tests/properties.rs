use std::sync::Arc;

use nalgebra::DMatrix;
use nudich::expr::{Expr, Func};
use nudich::linalg::{spectral_norm, svd_sorted};
use nudich::poly::Poly;
use nudich::polyops::{basis_dim, enumerate_basis, kronecker, lift_matrix};
use nudich::{build_evolution, parse_system, print_system, SystemSpec, Term, TimeExpression};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![(0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)), Just(Expr::Time)]
}

fn expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        let b = |e: Expr| Box::new(e);
        prop_oneof![
            inner.clone().prop_map(move |a| Expr::Neg(b(a))),
            (inner.clone(), inner.clone()).prop_map(move |(x, y)| Expr::Add(b(x), b(y))),
            (inner.clone(), inner.clone()).prop_map(move |(x, y)| Expr::Sub(b(x), b(y))),
            (inner.clone(), inner.clone()).prop_map(move |(x, y)| Expr::Mul(b(x), b(y))),
            (inner.clone(), inner.clone()).prop_map(move |(x, y)| Expr::Div(b(x), b(y))),
            (prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp), Just(Func::Abs)], inner.clone())
                .prop_map(|(f, a)| Expr::Call(f, vec![a])),
            (inner.clone(), inner).prop_map(|(x, y)| Expr::Call(Func::Pow, vec![x, y])),
        ]
    })
}

fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn poly(nvars: usize) -> impl Strategy<Value = Poly> {
    prop::collection::vec((prop::collection::vec(0u32..3, nvars), -2.0f64..2.0), 0..6).prop_map(move |terms| {
        let mut p = Poly::zero(nvars);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    })
}

proptest! {
    #[test]
    fn expressions_survive_printing(e in expr()) {
        let printed = e.to_string();
        let back = Expr::parse(&printed).unwrap();
        prop_assert_eq!(&back, &e, "{}", printed);
    }

    #[test]
    fn systems_survive_printing(
        n in 1usize..4,
        seed in prop::collection::vec(-5i32..5, 9),
        terms in prop::collection::vec((prop::collection::vec(0u32..3, 3), 0usize..3, -4i32..4), 0..4),
    ) {
        let a = DMatrix::from_fn(n, n, |i, j| seed[i * 3 + j] as f64 / 4.0);
        let mut s = SystemSpec::constant("prop", &a);
        for (l, j, c) in terms {
            let l: Vec<u32> = l[..n].to_vec();
            if l.iter().sum::<u32>() >= 2 {
                s.nonlinearity.push(Term { l, j: j % n, coeff: TimeExpression::constant(c as f64 / 2.0) });
            }
        }
        let text = print_system(&s);
        let back = parse_system(&text).unwrap();
        prop_assert_eq!(print_system(&back), text);
        for t in [-1.5, 0.0, 2.25] {
            prop_assert_eq!(back.eval_matrix(t).unwrap(), s.eval_matrix(t).unwrap());
        }
    }

    #[test]
    fn basis_size_matches_binomial(n in 1usize..6, k in 0u32..6) {
        let b = enumerate_basis(n, k).unwrap();
        prop_assert_eq!(Some(b.len()), basis_dim(n, k));
        for (i, m) in b.indices.iter().enumerate() {
            prop_assert_eq!(m.iter().sum::<u32>(), k);
            prop_assert_eq!(b.position(m), Some(i));
        }
    }

    #[test]
    fn truncated_products_evaluate_pointwise(p in poly(2), q in poly(2), x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let pq = p.mul_truncated(&q, 8);
        let lhs = pq.eval(&[x, y]);
        let rhs = p.eval(&[x, y]) * q.eval(&[x, y]);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn identity_substitution_truncates(p in poly(3), k in 0u32..6) {
        let ids: Vec<Poly> = (0..3).map(|i| Poly::var(3, i)).collect();
        let c = p.compose_truncated(&ids, k);
        prop_assert!((&c - &p.truncate(k)).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn lift_reverses_products(a in matrix(3, 3), b in matrix(3, 3), k in 1u32..4) {
        let lhs = lift_matrix(&(&a * &b), k).unwrap();
        let rhs = lift_matrix(&b, k).unwrap() * lift_matrix(&a, k).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-9 * (1.0 + lhs.amax()));
    }

    #[test]
    fn kronecker_norm_is_multiplicative(a in matrix(2, 3), b in matrix(3, 2)) {
        let nk = spectral_norm(&kronecker(&a, &b).unwrap());
        let prod = spectral_norm(&a) * spectral_norm(&b);
        prop_assert!((nk - prod).abs() <= 1e-10 * (1.0 + prod));
    }

    #[test]
    fn spectral_norm_is_top_singular_value(a in matrix(2, 2), scale in -200i32..200) {
        let m = a * 10f64.powi(scale);
        let s = svd_sorted(&m).sigma[0];
        prop_assert!((spectral_norm(&m) - s).abs() <= 1e-12 * s.max(f64::MIN_POSITIVE));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn off_grid_propagation_is_a_cocycle(a in matrix(2, 2), t in -1.9f64..1.9, r in -1.9f64..1.9, s in -1.9f64..1.9) {
        let ev = build_evolution(Arc::new(SystemSpec::constant("c", &a)), (-2.0, 2.0), 1e-11).unwrap();
        let direct = ev.propagate(t, s).unwrap();
        let composed = ev.propagate(t, r).unwrap() * ev.propagate(r, s).unwrap();
        prop_assert!((&direct - &composed).amax() <= 1e-8 * (1.0 + direct.amax()));
        let exact = (&a * (t - s)).exp();
        prop_assert!((&direct - &exact).amax() <= 1e-8 * (1.0 + exact.amax()));
    }
}

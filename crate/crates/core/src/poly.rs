//! Sparse multivariate polynomials with real coefficients.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

/// Exponent vector of a monomial.
pub type Monomial = Vec<u32>;

/// Scalar polynomial in `nvars` variables, stored as monomial → coefficient.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Poly {
    pub nvars: usize,
    pub terms: BTreeMap<Monomial, f64>,
}

pub fn degree_of(m: &[u32]) -> u32 {
    m.iter().sum()
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate function x_i.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut m = vec![0; nvars];
        m[i] = 1;
        Poly::monomial(m, 1.0)
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Poly::zero(m.len());
        p.add_term(m, c);
        p
    }

    /// Linear form Σ_j row[j] x_j.
    pub fn linear(row: &[f64]) -> Self {
        let n = row.len();
        let mut p = Poly::zero(n);
        for (j, &c) in row.iter().enumerate() {
            let mut m = vec![0; n];
            m[j] = 1;
            p.add_term(m, c);
        }
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.len(), self.nvars);
        if c == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    pub fn coeff(&self, m: &[u32]) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(|m| degree_of(m)).max()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = Poly::zero(self.nvars);
        for (m, v) in &self.terms {
            out.add_term(m.clone(), v * c);
        }
        out
    }

    /// Terms of total degree exactly `k`.
    pub fn homogeneous(&self, k: u32) -> Self {
        Poly { nvars: self.nvars, terms: self.terms.iter().filter(|(m, _)| degree_of(m) == k).map(|(m, v)| (m.clone(), *v)).collect() }
    }

    /// Terms of total degree at most `k`.
    pub fn truncate(&self, k: u32) -> Self {
        Poly { nvars: self.nvars, terms: self.terms.iter().filter(|(m, _)| degree_of(m) <= k).map(|(m, v)| (m.clone(), *v)).collect() }
    }

    /// Product dropping every term above degree `k`.
    pub fn mul_truncated(&self, other: &Poly, k: u32) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Poly::zero(self.nvars);
        for (ma, va) in &self.terms {
            let da = degree_of(ma);
            for (mb, vb) in &other.terms {
                if da + degree_of(mb) > k {
                    continue;
                }
                let m: Monomial = ma.iter().zip(mb).map(|(a, b)| a + b).collect();
                out.add_term(m, va * vb);
            }
        }
        out
    }

    pub fn pow(&self, e: u32) -> Self {
        let mut out = Poly::constant(self.nvars, 1.0);
        for _ in 0..e {
            out = &out * self;
        }
        out
    }

    pub fn pow_truncated(&self, e: u32, k: u32) -> Self {
        let mut out = Poly::constant(self.nvars, 1.0);
        for _ in 0..e {
            out = out.mul_truncated(self, k);
        }
        out
    }

    /// ∂/∂x_i.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Poly::zero(self.nvars);
        for (m, v) in &self.terms {
            if m[i] > 0 {
                let mut d = m.clone();
                d[i] -= 1;
                out.add_term(d, v * m[i] as f64);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(m, v)| v * m.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product::<f64>())
            .sum()
    }

    /// Substitute x_i ↦ subs[i], dropping terms above degree `k` in the new variables.
    pub fn compose_truncated(&self, subs: &[Poly], k: u32) -> Self {
        assert_eq!(subs.len(), self.nvars);
        let nv = subs.first().map(|p| p.nvars).unwrap_or(0);
        let mut out = Poly::zero(nv);
        // cache powers of each substituted polynomial
        let mut powers: Vec<Vec<Poly>> = subs.iter().map(|s| vec![Poly::constant(nv, 1.0), s.truncate(k)]).collect();
        for (m, v) in &self.terms {
            let mut term = Poly::constant(nv, *v);
            for (i, &e) in m.iter().enumerate() {
                while powers[i].len() <= e as usize {
                    let next = powers[i].last().unwrap().mul_truncated(&subs[i], k);
                    powers[i].push(next);
                }
                term = term.mul_truncated(&powers[i][e as usize], k);
                if term.is_zero() {
                    break;
                }
            }
            out = &out + &term;
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, v| a.max(v.abs()))
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, v) in &rhs.terms {
            out.add_term(m.clone(), *v);
        }
        out
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, v) in &rhs.terms {
            out.add_term(m.clone(), -*v);
        }
        out
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        self.mul_truncated(rhs, u32::MAX)
    }
}

/// Vector-valued polynomial, one [`Poly`] per component.
pub type VecPoly = Vec<Poly>;

pub fn vec_zero(nvars: usize, d: usize) -> VecPoly {
    vec![Poly::zero(nvars); d]
}

pub fn vec_add(a: &[Poly], b: &[Poly]) -> VecPoly {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Jacobian-vector product (∂h/∂x)·v for vector polynomials h, v.
pub fn jacobian_apply(h: &[Poly], v: &[Poly], k: u32) -> VecPoly {
    h.iter()
        .map(|hi| {
            let mut acc = Poly::zero(hi.nvars);
            for (j, vj) in v.iter().enumerate() {
                let d = hi.derivative(j);
                if !d.is_zero() {
                    acc = &acc + &d.mul_truncated(vj, k);
                }
            }
            acc
        })
        .collect()
}

/// Linear vector field x ↦ A x as polynomials.
pub fn linear_field(a: &nalgebra::DMatrix<f64>) -> VecPoly {
    (0..a.nrows()).map(|i| Poly::linear(&a.row(i).iter().copied().collect::<Vec<_>>())).collect()
}

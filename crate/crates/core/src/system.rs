//! System definitions: coefficient matrix A(t) and polynomial nonlinearity f(t, x).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Uniformly sampled scalar with linear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl SampleGrid {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid("sample grid needs at least 2 values".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::Invalid("sample grid needs finite t0 and dt > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("sample grid values must be finite".into()));
        }
        Ok(SampleGrid { t0, dt, values })
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.dt * (self.values.len() - 1) as f64
    }

    pub fn eval(&self, t: f64) -> Option<f64> {
        let u = (t - self.t0) / self.dt;
        let last = (self.values.len() - 1) as f64;
        let r = u.round();
        if (u - r).abs() < 1e-9 && r >= 0.0 && r <= last {
            return Some(self.values[r as usize]);
        }
        if !(u >= 0.0 && u <= last) {
            return None;
        }
        let i = (u.floor() as usize).min(self.values.len() - 2);
        let w = u - i as f64;
        Some(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TimeExpression {
    Formula(Expr),
    Sampled(SampleGrid),
}

impl TimeExpression {
    pub fn constant(v: f64) -> Self {
        TimeExpression::Formula(Expr::constant(v))
    }

    pub fn parse(src: &str) -> std::result::Result<Self, crate::expr::ParseError> {
        Expr::parse(src).map(TimeExpression::Formula)
    }

    pub fn eval(&self, t: f64, what: &str) -> Result<f64> {
        let v = match self {
            TimeExpression::Formula(e) => e.eval(t),
            TimeExpression::Sampled(g) => g.eval(t).ok_or_else(|| Error::OutOfGrid {
                what: what.to_string(),
                t,
                lo: g.t0,
                hi: g.t_end(),
            })?,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: what.to_string(), t })
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeExpression::Formula(e) if e.is_constant())
    }
}

/// One monomial term `coeff(t) * x^l` in component `j` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub l: Vec<u32>,
    pub j: usize,
    pub coeff: TimeExpression,
}

impl Term {
    pub fn degree(&self) -> u32 {
        self.l.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub n: usize,
    /// Row-major n×n entries.
    pub entries: Vec<TimeExpression>,
    pub nonlinearity: Vec<Term>,
}

/// Anything that can hand out A(t).
pub trait CoefficientField: Send + Sync {
    fn dim(&self) -> usize;
    fn coefficient(&self, t: f64) -> Result<DMatrix<f64>>;
}

impl SystemSpec {
    pub fn new(name: &str, n: usize, entries: Vec<TimeExpression>, nonlinearity: Vec<Term>) -> Result<Self> {
        let spec = SystemSpec { name: name.to_string(), n, entries, nonlinearity };
        spec.validate()?;
        Ok(spec)
    }

    /// Constant-coefficient system from a dense matrix.
    pub fn constant(name: &str, a: &DMatrix<f64>) -> Self {
        assert!(a.is_square());
        let n = a.nrows();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(TimeExpression::constant(a[(i, j)]));
            }
        }
        SystemSpec { name: name.to_string(), n, entries, nonlinearity: Vec::new() }
    }

    pub fn diagonal(name: &str, lambda: &[f64]) -> Self {
        Self::constant(name, &DMatrix::from_diagonal(&DVector::from_column_slice(lambda)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        if self.entries.len() != self.n * self.n {
            return Err(Error::Invalid(format!(
                "expected {} matrix entries, found {}",
                self.n * self.n,
                self.entries.len()
            )));
        }
        for term in &self.nonlinearity {
            if term.l.len() != self.n {
                return Err(Error::Invalid(format!(
                    "multi-index {:?} has length {}, dimension is {}",
                    term.l,
                    term.l.len(),
                    self.n
                )));
            }
            if term.degree() < 2 {
                return Err(Error::Invalid(format!("multi-index {:?} has degree < 2", term.l)));
            }
            if term.j >= self.n {
                return Err(Error::Invalid(format!("component {} out of range", term.j + 1)));
            }
        }
        Ok(())
    }

    pub fn entry(&self, i: usize, j: usize) -> &TimeExpression {
        &self.entries[i * self.n + j]
    }

    pub fn eval_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.n;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = self.entry(i, j).eval(t, &format!("a_{}_{}", i + 1, j + 1))?;
            }
        }
        Ok(a)
    }

    pub fn eval_nonlinearity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n);
        for term in &self.nonlinearity {
            let c = term.coeff.eval(t, "nonlinear coefficient")?;
            let mono: f64 = term.l.iter().zip(x.iter()).map(|(&p, &xi)| xi.powi(p as i32)).product();
            out[term.j] += c * mono;
        }
        Ok(out)
    }

    pub fn max_degree(&self) -> u32 {
        self.nonlinearity.iter().map(Term::degree).max().unwrap_or(0)
    }

    pub fn is_autonomous(&self) -> bool {
        self.entries.iter().all(TimeExpression::is_constant)
            && self.nonlinearity.iter().all(|t| t.coeff.is_constant())
    }

    /// The system A(t) - γI.
    pub fn shifted(&self, gamma: f64) -> SystemSpec {
        let mut out = self.clone();
        out.name = format!("{}-shift", self.name);
        for i in 0..self.n {
            let e = &mut out.entries[i * self.n + i];
            *e = match e.clone() {
                TimeExpression::Formula(x) => TimeExpression::Formula(Expr::Sub(
                    Box::new(x),
                    Box::new(Expr::constant(gamma)),
                )),
                TimeExpression::Sampled(mut g) => {
                    g.values.iter_mut().for_each(|v| *v -= gamma);
                    TimeExpression::Sampled(g)
                }
            };
        }
        out
    }
}

impl CoefficientField for SystemSpec {
    fn dim(&self) -> usize {
        self.n
    }

    fn coefficient(&self, t: f64) -> Result<DMatrix<f64>> {
        self.eval_matrix(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_interpolates_and_hits_nodes() {
        let g = SampleGrid::new(0.0, 1.0, vec![0.0, 2.0]).unwrap();
        assert_eq!(g.eval(0.5), Some(1.0));
        assert_eq!(g.eval(1.0), Some(2.0));
        assert_eq!(g.eval(1.5), None);
        let g = SampleGrid::new(-1.0, 0.1, (0..21).map(|i| (i as f64).sin()).collect()).unwrap();
        for i in 0..21 {
            assert_eq!(g.eval(-1.0 + 0.1 * i as f64), Some((i as f64).sin()));
        }
        assert!(SampleGrid::new(0.0, 1.0, vec![1.0]).is_err());
        assert!(SampleGrid::new(0.0, 0.0, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn nonlinearity_evaluation() {
        let a = DMatrix::zeros(2, 2);
        let mut spec = SystemSpec::constant("z", &a);
        let x = DVector::from_vec(vec![3.0, 5.0]);
        assert_eq!(spec.eval_nonlinearity(0.0, &x).unwrap(), DVector::zeros(2));
        spec.nonlinearity.push(Term { l: vec![2, 0], j: 1, coeff: TimeExpression::constant(1.0) });
        assert_eq!(spec.eval_nonlinearity(0.0, &x).unwrap().as_slice(), &[0.0, 9.0]);
        spec.nonlinearity = vec![Term {
            l: vec![1, 1],
            j: 0,
            coeff: TimeExpression::parse("exp(-abs(t))").unwrap(),
        }];
        let x = DVector::from_vec(vec![2.0, 3.0]);
        assert_eq!(spec.eval_nonlinearity(0.0, &x).unwrap().as_slice(), &[6.0, 0.0]);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let spec = SystemSpec::new(
            "bad",
            1,
            vec![TimeExpression::parse("1/t").unwrap()],
            vec![],
        )
        .unwrap();
        assert!(matches!(spec.eval_matrix(0.0), Err(Error::NonFinite { .. })));
        assert_eq!(spec.eval_matrix(2.0).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn shift_subtracts_on_diagonal() {
        let spec = SystemSpec::diagonal("d", &[-1.0, 2.0]);
        let s = spec.shifted(0.5);
        let a = s.eval_matrix(3.0).unwrap();
        assert_eq!(a[(0, 0)], -1.5);
        assert_eq!(a[(1, 1)], 1.5);
        assert_eq!(a[(0, 1)], 0.0);
    }
}

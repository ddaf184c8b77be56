//! Evolution operator Φ(t,s) of `x' = A(t)x` on a finite window.
//!
//! The window is cut into a uniform checkpoint grid (at least 8 nodes per unit
//! time). Each grid step Φ(t_{i+1}, t_i) is integrated from the identity with
//! adaptive substeps, passing through Chebyshev–Lobatto points of the cell;
//! Φ(t,s) between nodes is the ordered product of steps and off-node ends
//! come from barycentric interpolation of those cell samples.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::integrate_matrix;
use crate::linalg::spectral_norm;
use crate::system::CoefficientField;

pub const BLOWUP_LIMIT: f64 = 1e150;
pub const CHECKPOINTS_PER_UNIT: f64 = 8.0;
/// Cocycle defects are compared against `COCYCLE_FACTOR * tol`.
pub const COCYCLE_FACTOR: f64 = 100.0;
/// Polynomial degree of the in-cell interpolant.
pub const CELL_DEGREE: usize = 10;

/// Chebyshev–Lobatto points on [0, 1].
fn cell_points() -> [f64; CELL_DEGREE + 1] {
    std::array::from_fn(|q| 0.5 * (1.0 - (std::f64::consts::PI * q as f64 / CELL_DEGREE as f64).cos()))
}

/// Barycentric interpolation of samples at [`cell_points`].
fn interpolate_cell(samples: &[DMatrix<f64>], theta: f64) -> DMatrix<f64> {
    let pts = cell_points();
    let mut num = DMatrix::zeros(samples[0].nrows(), samples[0].ncols());
    let mut den = 0.0;
    for (q, (&x, m)) in pts.iter().zip(samples).enumerate() {
        let d = theta - x;
        if d == 0.0 {
            return m.clone();
        }
        let mut w = if q % 2 == 0 { 1.0 } else { -1.0 };
        if q == 0 || q == CELL_DEGREE {
            w *= 0.5;
        }
        let c = w / d;
        num += m * c;
        den += c;
    }
    num / den
}

/// Uniform grid `t_i = t0 + (t1 - t0) i / steps`, `i = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Self {
        assert!(t1 > t0 && steps > 0);
        TimeGrid { t0, t1, steps }
    }

    /// Grid with at least `per_unit` nodes per unit time.
    pub fn with_density(t0: f64, t1: f64, per_unit: f64) -> Self {
        let steps = ((t1 - t0) * per_unit).ceil().max(1.0) as usize;
        TimeGrid::new(t0, t1, steps)
    }

    pub fn h(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t1
        } else {
            self.t0 + (self.t1 - self.t0) * (i as f64) / (self.steps as f64)
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn nearest(&self, t: f64) -> usize {
        let u = ((t - self.t0) / self.h()).round();
        u.clamp(0.0, self.steps as f64) as usize
    }

    /// Index of the node at `t`, if `t` is a node up to rounding.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.nearest(t);
        ((t - self.node(i)).abs() <= 1e-9 * self.h()).then_some(i)
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.t0.abs().max(self.t1.abs()));
        t >= self.t0 - slack && t <= self.t1 + slack
    }
}

pub struct EvolutionOperator {
    field: Arc<dyn CoefficientField>,
    grid: TimeGrid,
    steps: Vec<DMatrix<f64>>,
    steps_inv: Vec<DMatrix<f64>>,
    /// Φ(t_i + θ_q h, t_i) at the cell points.
    dense: Vec<Vec<DMatrix<f64>>>,
    fundamental: Vec<DMatrix<f64>>,
    step_err: Vec<f64>,
    tol: f64,
}

impl std::fmt::Debug for EvolutionOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvolutionOperator")
            .field("dim", &self.dim())
            .field("grid", &self.grid)
            .field("tol", &self.tol)
            .finish()
    }
}

/// Integrate Φ over `window` with local tolerance `tol`.
pub fn build_evolution(field: Arc<dyn CoefficientField>, window: (f64, f64), tol: f64) -> Result<EvolutionOperator> {
    let (t0, t1) = window;
    if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Invalid(format!("window [{t0}, {t1}] is empty or non-finite")));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid("integrator tolerance must be positive".into()));
    }
    let grid = TimeGrid::with_density(t0, t1, CHECKPOINTS_PER_UNIT);
    build_on_grid(field, grid, tol)
}

pub fn build_on_grid(field: Arc<dyn CoefficientField>, grid: TimeGrid, tol: f64) -> Result<EvolutionOperator> {
    let n = field.dim();
    // steps start from the identity, so they are independent
    let pts = cell_points();
    let pieces: Vec<Result<(Vec<DMatrix<f64>>, DMatrix<f64>, f64)>> = (0..grid.steps)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (grid.node(i), grid.node(i + 1));
            let mut samples = Vec::with_capacity(pts.len());
            samples.push(DMatrix::identity(n, n));
            let mut err = 0.0;
            for q in 1..pts.len() {
                let (u, v) = (a + pts[q - 1] * (b - a), if q == CELL_DEGREE { b } else { a + pts[q] * (b - a) });
                let out = integrate_matrix(field.as_ref(), samples[q - 1].clone(), u, v, tol, None)?;
                err += out.err;
                samples.push(out.y);
            }
            let inv = samples[CELL_DEGREE]
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical(format!("singular step propagator at t = {a}")))?;
            Ok((samples, inv, err))
        })
        .collect();
    let mut steps = Vec::with_capacity(grid.steps);
    let mut steps_inv = Vec::with_capacity(grid.steps);
    let mut dense = Vec::with_capacity(grid.steps);
    let mut fundamental = Vec::with_capacity(grid.len());
    let mut step_err = Vec::with_capacity(grid.steps);
    fundamental.push(DMatrix::identity(n, n));
    for (i, piece) in pieces.into_iter().enumerate() {
        let (samples, inv, err) = piece?;
        let y = samples[CELL_DEGREE].clone();
        let next = &y * &fundamental[i];
        let norm = spectral_norm(&next);
        if !(norm <= BLOWUP_LIMIT) {
            return Err(Error::BlowUp { t: grid.node(i + 1), limit: BLOWUP_LIMIT });
        }
        fundamental.push(next);
        steps.push(y);
        steps_inv.push(inv);
        dense.push(samples);
        step_err.push(err);
    }
    Ok(EvolutionOperator { field, grid, steps, steps_inv, dense, fundamental, step_err, tol })
}

impl EvolutionOperator {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn window(&self) -> (f64, f64) {
        (self.grid.t0, self.grid.t1)
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn field(&self) -> &Arc<dyn CoefficientField> {
        &self.field
    }

    pub fn coefficient(&self, t: f64) -> Result<DMatrix<f64>> {
        self.field.coefficient(t)
    }

    /// Φ(t_{i+1}, t_i).
    pub fn step(&self, i: usize) -> &DMatrix<f64> {
        &self.steps[i]
    }

    /// Φ(t_i, t_{i+1}).
    pub fn step_inv(&self, i: usize) -> &DMatrix<f64> {
        &self.steps_inv[i]
    }

    /// Φ(t_i, T_min).
    pub fn checkpoint(&self, i: usize) -> &DMatrix<f64> {
        &self.fundamental[i]
    }

    pub fn step_errors(&self) -> &[f64] {
        &self.step_err
    }

    /// Φ(t_i, t_j) as an ordered product of grid steps.
    pub fn propagate_nodes(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::identity(n, n);
        if i > j {
            for k in j..i {
                m = &self.steps[k] * m;
            }
        } else {
            for k in (i..j).rev() {
                m = &self.steps_inv[k] * m;
            }
        }
        m
    }

    fn check_window(&self, t: f64) -> Result<()> {
        if self.grid.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfWindow { t, lo: self.grid.t0, hi: self.grid.t1 })
        }
    }

    /// Cell index `c` and Φ(t, t_c) for the cell containing `t`.
    fn in_cell(&self, t: f64) -> (usize, Option<DMatrix<f64>>) {
        if let Some(i) = self.grid.index_of(t) {
            return (i, None);
        }
        let h = self.grid.h();
        let c = (((t - self.grid.t0) / h).floor().max(0.0) as usize).min(self.grid.steps - 1);
        let theta = ((t - self.grid.node(c)) / h).clamp(0.0, 1.0);
        (c, Some(interpolate_cell(&self.dense[c], theta)))
    }

    /// Φ(t, s) for any `t, s` in the window.
    pub fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.check_window(t)?;
        self.check_window(s)?;
        let n = self.dim();
        if t == s {
            return Ok(DMatrix::identity(n, n));
        }
        let (it, left) = self.in_cell(t);
        let (is, right) = self.in_cell(s);
        let mut out = self.propagate_nodes(it, is);
        if let Some(r) = right {
            let r_inv = r.try_inverse().ok_or_else(|| Error::Numerical(format!("singular in-cell propagator at t = {s}")))?;
            out *= r_inv;
        }
        if let Some(l) = left {
            out = l * out;
        }
        Ok(out)
    }

    pub fn shift(&self, gamma: f64) -> ShiftedOperator<'_> {
        ShiftedOperator { base: self, gamma }
    }

    /// Checkpoints as CSV: `t`, then row-major entries of Φ(t, T_min).
    pub fn checkpoints_csv(&self) -> String {
        let mut out = String::from("t");
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!(",phi_{}_{}", i + 1, j + 1));
            }
        }
        out.push('\n');
        for (k, m) in self.fundamental.iter().enumerate() {
            out.push_str(&crate::report::fmt_f64(self.grid.node(k)));
            for i in 0..n {
                for j in 0..n {
                    out.push(',');
                    out.push_str(&crate::report::fmt_f64(m[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Φ_γ(t,s) = e^{-γ(t-s)} Φ(t,s).
#[derive(Clone, Copy, Debug)]
pub struct ShiftedOperator<'a> {
    pub base: &'a EvolutionOperator,
    pub gamma: f64,
}

impl ShiftedOperator<'_> {
    pub fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        Ok(self.base.propagate(t, s)? * (-self.gamma * (t - s)).exp())
    }

    pub fn propagate_nodes(&self, i: usize, j: usize) -> DMatrix<f64> {
        let g = self.base.grid();
        self.base.propagate_nodes(i, j) * (-self.gamma * (g.node(i) - g.node(j))).exp()
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvolutionDiagnostics {
    /// max ‖Φ(t,s)Φ(s,τ) − Φ(t,τ)‖ / max(1, ‖Φ(t,s)‖‖Φ(s,τ)‖) over sampled triples.
    pub cocycle_defect: f64,
    pub cocycle_bound: f64,
    /// max |det Φ(t,s) − exp(∫ tr A)| / exp(∫ tr A) over sampled pairs.
    pub liouville_defect: f64,
    pub samples: usize,
}

/// Cocycle and Liouville checks on `samples` random time triples in the window.
pub fn diagnostics(ev: &EvolutionOperator, samples: usize, seed: u64) -> Result<EvolutionDiagnostics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ev.grid();
    let mut cocycle: f64 = 0.0;
    let mut liouville: f64 = 0.0;
    for _ in 0..samples {
        let (t, s, tau) = (rng.gen_range(g.t0..=g.t1), rng.gen_range(g.t0..=g.t1), rng.gen_range(g.t0..=g.t1));
        let ts = ev.propagate(t, s)?;
        let st = ev.propagate(s, tau)?;
        let tt = ev.propagate(t, tau)?;
        let scale = 1.0f64.max(spectral_norm(&ts) * spectral_norm(&st));
        cocycle = cocycle.max(spectral_norm(&(&ts * &st - &tt)) / scale);

        let integral = trace_integral(ev.field().as_ref(), s, t)?;
        let det = ts.determinant();
        let expected = integral.exp();
        liouville = liouville.max((det - expected).abs() / expected);
    }
    Ok(EvolutionDiagnostics {
        cocycle_defect: cocycle,
        cocycle_bound: COCYCLE_FACTOR * ev.tol(),
        liouville_defect: liouville,
        samples,
    })
}

/// ∫_s^t tr A(u) du by composite 5-point Gauss–Legendre on unit-length panels.
pub fn trace_integral(field: &dyn CoefficientField, s: f64, t: f64) -> Result<f64> {
    if s == t {
        return Ok(0.0);
    }
    let panels = ((t - s).abs() * 4.0).ceil().max(1.0) as usize;
    let h = (t - s) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = s + h * p as f64;
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
            let u = a + h * x;
            total += w * h * field.coefficient(u)?.trace();
        }
    }
    Ok(total)
}

/// Gauss–Legendre nodes on [0, 1].
pub const GL5_NODES: [f64; 5] = [
    0.046_910_077_030_668_004,
    0.230_765_344_947_158_45,
    0.5,
    0.769_234_655_052_841_6,
    0.953_089_922_969_332,
];
pub const GL5_WEIGHTS: [f64; 5] = [
    0.118_463_442_528_094_54,
    0.239_314_335_249_683_23,
    0.284_444_444_444_444_45,
    0.239_314_335_249_683_23,
    0.118_463_442_528_094_54,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SystemSpec;

    fn bv_scalar() -> Arc<SystemSpec> {
        Arc::new(crate::parse_system("[system]\nname = \"bv\"\ndimension = 1\n[matrix]\na_1_1 = \"-(1.0 + 0.1*t*sin(t))\"\n").unwrap())
    }

    #[test]
    fn zero_system_is_identity() {
        let spec = Arc::new(SystemSpec::diagonal("z", &[0.0, 0.0]));
        let ev = build_evolution(spec, (-2.0, 3.0), 1e-10).unwrap();
        for (t, s) in [(-2.0, 3.0), (0.3, -1.7), (2.99, 2.99)] {
            assert_eq!(ev.propagate(t, s).unwrap(), DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn constant_diagonal() {
        let spec = Arc::new(SystemSpec::diagonal("d", &[-1.0, 2.0]));
        let ev = build_evolution(spec, (0.0, 1.0), 1e-10).unwrap();
        let p = ev.propagate(1.0, 0.0).unwrap();
        assert!((p[(0, 0)] - (-1.0f64).exp()).abs() < 1e-9);
        assert!((p[(1, 1)] - 2.0f64.exp()).abs() < 1e-8);
        let q = ev.shift(2.0).propagate(1.0, 0.0).unwrap();
        assert!((q[(0, 0)] - (-3.0f64).exp()).abs() < 1e-9);
        assert!((q[(1, 1)] - 1.0).abs() < 1e-9);
        assert_eq!(ev.shift(0.0).propagate(0.7, 0.2).unwrap(), ev.propagate(0.7, 0.2).unwrap());
    }

    #[test]
    fn scalar_closed_form() {
        let tol = 1e-10;
        let ev = build_evolution(bv_scalar(), (-1.0, 11.0), tol).unwrap();
        for t in [1.0, 5.0, 10.0] {
            let exact = (-t + 0.1 * (t * f64::cos(t) - f64::sin(t))).exp();
            let got = ev.propagate(t, 0.0).unwrap()[(0, 0)];
            assert!((got - exact).abs() <= 10.0 * tol * exact.max(1.0), "t={t}: {got} vs {exact}");
        }
        // off-grid on both ends
        let (t, s) = (7.3331, 0.0417);
        let f = |u: f64| -u + 0.1 * (u * u.cos() - u.sin());
        let exact = (f(t) - f(s)).exp();
        assert!((ev.propagate(t, s).unwrap()[(0, 0)] / exact - 1.0).abs() < 1e-8);
    }

    #[test]
    fn out_of_window_is_an_error() {
        let ev = build_evolution(bv_scalar(), (0.0, 1.0), 1e-8).unwrap();
        assert!(matches!(ev.propagate(1.5, 0.0), Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn blow_up_guard() {
        let spec = Arc::new(SystemSpec::diagonal("fast", &[50.0]));
        assert!(matches!(build_evolution(spec, (0.0, 10.0), 1e-8), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn cocycle_and_liouville() {
        let ev = build_evolution(bv_scalar(), (-10.0, 10.0), 1e-10).unwrap();
        let d = diagnostics(&ev, 50, 7).unwrap();
        assert!(d.cocycle_defect <= d.cocycle_bound, "{d:?}");
        assert!(d.liouville_defect < 1e-6, "{d:?}");
    }
}

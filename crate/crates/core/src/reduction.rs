//! Block diagonalization by nonuniform Lyapunov transforms.
//!
//! At a gap shift γ the invariant projector P splits the phase space. With
//! `X(t) = Φ(t,s0) T^{-1}` adapted to the splitting, each column block of X is
//! replaced by its orthonormal polar factor; the result S(t) satisfies
//! ‖S(t)‖ ≤ √2 and conjugates A to a block-diagonal B. Splitting is repeated
//! on the trailing block at each further gap.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolution::{build_on_grid, EvolutionOperator};
use crate::linalg::{self, spectral_norm};
use crate::polyops::off_block_ratio;
use crate::spectrum::{default_gamma_range, ProjectorField, scan_spectrum, DichotomyTester, Interval, SpectrumConfig, SpectrumResult};
use crate::system::CoefficientField;

#[derive(Clone, Debug, Serialize)]
pub struct ReductionConfig {
    pub spectrum: SpectrumConfig,
    pub tol_gamma: f64,
    /// Largest admissible off-block entry of S^{-1}(AS − Ṡ).
    pub coupling_tol: f64,
    /// Largest admissible gap between the analytic and finite-difference B.
    pub crosscheck_tol: f64,
    /// Finite-difference step for Ṡ.
    pub fd_step: f64,
    /// Smallest admissible σ_min/σ_max of a column block of X.
    pub sigma_floor: f64,
    /// Random (t, s) pairs for the similarity check.
    pub similarity_samples: usize,
    pub seed: u64,
    /// Re-scan every block and compare with the spectral intervals.
    pub verify_blocks: bool,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            spectrum: SpectrumConfig::default(),
            tol_gamma: 0.05,
            coupling_tol: 1e-4,
            crosscheck_tol: 1e-4,
            fd_step: 1e-3,
            sigma_floor: 1e-12,
            similarity_samples: 40,
            seed: 0x5eed,
            verify_blocks: true,
        }
    }
}

/// T with T P T^{-1} = diag(I_r, 0); columns of T^{-1} are orthonormal bases of Im P and Ker P.
pub fn projector_normalizer(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n = p.nrows();
    if n != p.ncols() {
        return Err(Error::Invalid("projector must be square".into()));
    }
    let eig = p.complex_eigenvalues();
    let tol = 1e-6 * p.amax().max(1.0);
    let mut r = 0;
    for z in eig.iter() {
        let d0 = z.norm();
        let d1 = (z - Complex::new(1.0, 0.0)).norm();
        if d1 < tol {
            r += 1;
        } else if d0 >= tol {
            return Err(Error::Numerical(format!("projector eigenvalue {z} is not near 0 or 1")));
        }
    }
    let mut tinv = DMatrix::zeros(n, n);
    tinv.columns_mut(0, r).copy_from(&linalg::column_basis(p, r));
    tinv.columns_mut(r, n - r).copy_from(&linalg::null_basis(p, r));
    let t = tinv.clone().try_inverse().ok_or_else(|| Error::Numerical("image and kernel bases are dependent".into()))?;
    Ok((t, r))
}

/// How a column block is turned into orthonormal columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Polar factor `X_b (X_bᵀX_b)^{-1/2}` of the adapted fundamental matrix.
    Polar,
    /// Q factor (positive diagonal R) of the subspace marched in its
    /// attracting direction. Used for blocks that still hold several
    /// spectral intervals, where X_bᵀX_b is too ill-conditioned.
    Flow,
}

/// One column block `X_b(t) = Φ(t,s0) T^{-1}_b` of the adapted fundamental
/// matrix, stored at grid nodes and closed between nodes by local propagation.
///
/// With the polar frame the coefficient field is `B_b = V B' Vᵀ` with
/// `X_b = U Σ Vᵀ`, `B'_ij = σ_i M_ij / (σ_i + σ_j)` and `M = Uᵀ(A + Aᵀ)U`.
/// With the flow frame `X_b = QR` and B_b is the upper triangular part of
/// `QᵀAQ` with the strictly lower part folded onto it.
pub struct ReducedField {
    parent: Arc<EvolutionOperator>,
    nodes: Vec<DMatrix<f64>>,
    sigma_floor: f64,
    frame: Frame,
    /// Flow frames extend from the node on the side they were marched from.
    forward: bool,
}

impl ReducedField {
    pub fn new(parent: Arc<EvolutionOperator>, nodes: Vec<DMatrix<f64>>, sigma_floor: f64) -> Self {
        ReducedField { parent, nodes, sigma_floor, frame: Frame::Polar, forward: true }
    }

    pub fn flow(parent: Arc<EvolutionOperator>, bases: Vec<DMatrix<f64>>, forward: bool) -> Self {
        ReducedField { parent, nodes: bases, sigma_floor: 0.0, frame: Frame::Flow, forward }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn x_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let g = self.parent.grid();
        if let Some(i) = g.index_of(t) {
            return Ok(self.nodes[i].clone());
        }
        let i = (((t - g.t0) / g.h()).floor().max(0.0) as usize).min(g.steps - 1);
        let from = if self.frame == Frame::Flow && !self.forward { i + 1 } else { i };
        Ok(self.parent.propagate(t, g.node(from))? * &self.nodes[from])
    }

    fn svd_at(&self, t: f64) -> Result<linalg::SortedSvd> {
        let s = linalg::svd_sorted(&self.x_at(t)?);
        let (max, min) = (s.sigma[0], *s.sigma.last().unwrap());
        if !(min > self.sigma_floor * max) {
            return Err(Error::Numerical(format!(
                "column block of the adapted fundamental matrix is numerically rank-deficient at t = {t} (σ ratio {:e})",
                min / max
            )));
        }
        Ok(s)
    }

    /// Orthonormal columns S_b(t) (n × n_b) of the block's frame.
    pub fn polar_at(&self, t: f64) -> Result<DMatrix<f64>> {
        match self.frame {
            Frame::Polar => {
                let s = self.svd_at(t)?;
                Ok(&s.u * s.v.transpose())
            }
            Frame::Flow => Ok(orthonormalize(self.x_at(t)?).0),
        }
    }
}

impl CoefficientField for ReducedField {
    fn dim(&self) -> usize {
        self.nodes[0].ncols()
    }

    fn coefficient(&self, t: f64) -> Result<DMatrix<f64>> {
        let a = self.parent.coefficient(t)?;
        if self.frame == Frame::Flow {
            let q = orthonormalize(self.x_at(t)?).0;
            let m = q.transpose() * a * &q;
            let k = m.nrows();
            return Ok(DMatrix::from_fn(k, k, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Less => m[(i, j)] + m[(j, i)],
                std::cmp::Ordering::Equal => m[(i, i)],
                std::cmp::Ordering::Greater => 0.0,
            }));
        }
        let s = self.svd_at(t)?;
        let m = s.u.transpose() * (&a + a.transpose()) * &s.u;
        let k = s.sigma.len();
        let bp = DMatrix::from_fn(k, k, |i, j| s.sigma[i] * m[(i, j)] / (s.sigma[i] + s.sigma[j]));
        Ok(&s.v * bp * s.v.transpose())
    }
}

/// Thin QR with a nonnegative diagonal in R.
fn orthonormalize(m: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = m.qr();
    let (mut q, mut r) = (qr.q(), qr.r());
    for j in 0..r.nrows() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    (q, r)
}

/// Invariant subspace marched in its dominant direction with QR at every
/// step; returns node bases E_i and block propagators with
/// `Φ(t_{i+1}, t_i) E_i = E_{i+1} R_i`.
fn march_subspace(ev: &EvolutionOperator, start: DMatrix<f64>, forward: bool) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let steps = ev.grid().steps;
    let mut bases = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut props = vec![DMatrix::zeros(0, 0); steps];
    let (q, _) = orthonormalize(start);
    if forward {
        bases[0] = q;
        for i in 0..steps {
            let (q, r) = orthonormalize(ev.step(i) * &bases[i]);
            bases[i + 1] = q;
            props[i] = r;
        }
    } else {
        bases[steps] = q;
        for i in (0..steps).rev() {
            // Φ(t_i, t_{i+1}) E_{i+1} = E_i K  ⇒  R_i = K^{-1}
            let (q, k) = orthonormalize(ev.step_inv(i) * &bases[i + 1]);
            bases[i] = q;
            props[i] = k.try_inverse().ok_or_else(|| Error::Numerical(format!("stable subspace collapsed at t = {}", ev.grid().node(i))))?;
        }
    }
    Ok((bases, props))
}

/// X_b at every node from E_b and the block propagators, normalized to E_b at node `k0`.
fn block_nodes(bases: &[DMatrix<f64>], props: &[DMatrix<f64>], k0: usize) -> Result<Vec<DMatrix<f64>>> {
    let r = bases[0].ncols();
    let mut c = vec![DMatrix::zeros(0, 0); bases.len()];
    c[k0] = DMatrix::identity(r, r);
    for i in k0..props.len() {
        c[i + 1] = &props[i] * &c[i];
    }
    for i in (0..k0).rev() {
        let inv = props[i].clone().try_inverse().ok_or_else(|| Error::Numerical("singular block propagator".into()))?;
        c[i] = inv * &c[i + 1];
    }
    Ok(bases.iter().zip(&c).map(|(e, c)| e * c).collect())
}

/// One splitting: the current system, its base point and the two column blocks.
pub struct Stage {
    pub system: Arc<EvolutionOperator>,
    pub s0: f64,
    pub rank: usize,
    /// condition number of T^{-1} = [E_lead E_trail] at s0
    pub split_condition: f64,
    pub lead: Option<Arc<ReducedField>>,
    pub trail: Option<Arc<ReducedField>>,
}

impl Stage {
    /// Split along the projector field `proj` with base node `k0`.
    ///
    /// The image is marched backward from the window end and the kernel
    /// forward from the window start, the directions in which each is
    /// attracting; the projector only supplies initial subspaces.
    pub fn new(system: Arc<EvolutionOperator>, proj: &ProjectorField, k0: usize, sigma_floor: f64, trail_frame: Frame) -> Result<Self> {
        let n = system.dim();
        let first = proj.projectors.first().ok_or_else(|| Error::Invalid("empty projector field".into()))?;
        let last = proj.projectors.last().unwrap();
        let (_, r) = projector_normalizer(last)?;
        let mut lead = None;
        let mut trail = None;
        let mut tinv = DMatrix::zeros(n, n);
        if r > 0 {
            let (e, k) = march_subspace(&system, linalg::column_basis(last, r), false)?;
            tinv.columns_mut(0, r).copy_from(&e[k0]);
            lead = Some(Arc::new(ReducedField::new(system.clone(), block_nodes(&e, &k, k0)?, sigma_floor)));
        }
        if r < n {
            let (e, k) = march_subspace(&system, linalg::null_basis(first, r), true)?;
            tinv.columns_mut(r, n - r).copy_from(&e[k0]);
            trail = Some(Arc::new(match trail_frame {
                Frame::Polar => ReducedField::new(system.clone(), block_nodes(&e, &k, k0)?, sigma_floor),
                Frame::Flow => ReducedField::flow(system.clone(), e, true),
            }));
        }
        let split_condition = linalg::condition_number(&tinv);
        if !(split_condition < 1e8) {
            return Err(Error::Numerical(format!("stable and unstable subspaces nearly parallel at s0 (condition {split_condition:e})")));
        }
        let s0 = system.grid().node(k0);
        Ok(Stage { system, s0, rank: r, split_condition, lead, trail })
    }

    /// A stage that leaves the system unchanged.
    pub fn identity(system: Arc<EvolutionOperator>, s0: f64) -> Self {
        let rank = system.dim();
        Stage { system, s0, rank, split_condition: 1.0, lead: None, trail: None }
    }

    /// S(t) = [polar(X_lead) polar(X_trail)].
    pub fn transform_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.system.dim();
        if self.lead.is_none() && self.trail.is_none() {
            return Ok(DMatrix::identity(n, n));
        }
        let mut s = DMatrix::zeros(n, n);
        if let Some(l) = &self.lead {
            s.columns_mut(0, self.rank).copy_from(&l.polar_at(t)?);
        }
        if let Some(tr) = &self.trail {
            s.columns_mut(self.rank, n - self.rank).copy_from(&tr.polar_at(t)?);
        }
        Ok(s)
    }
}

/// Transform S(t) sampled on the grid, with its growth envelope.
#[derive(Clone, Debug)]
pub struct LyapunovTransform {
    pub times: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub s_inv: Vec<DMatrix<f64>>,
    /// max(‖S‖, ‖S^{-1}‖) ≤ M e^{ε|t|} on the grid.
    pub epsilon: f64,
    pub m_eps: f64,
    pub max_norm: f64,
    pub max_inverse_norm: f64,
}

impl LyapunovTransform {
    pub fn from_samples(times: Vec<f64>, s: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut s_inv = Vec::with_capacity(s.len());
        for (t, m) in times.iter().zip(&s) {
            s_inv.push(m.clone().try_inverse().ok_or_else(|| Error::Numerical(format!("S(t) singular at t = {t}")))?);
        }
        let norms: Vec<f64> = s.iter().map(spectral_norm).collect();
        let inv_norms: Vec<f64> = s_inv.iter().map(spectral_norm).collect();
        let logs: Vec<(f64, f64)> = times.iter().zip(norms.iter().zip(&inv_norms)).map(|(t, (a, b))| (t.abs(), a.max(*b).ln())).collect();
        let epsilon = growth_slope(&logs);
        let log_m = logs.iter().map(|(r, v)| v - epsilon * r).fold(f64::NEG_INFINITY, f64::max);
        Ok(LyapunovTransform {
            times,
            s,
            s_inv,
            epsilon,
            m_eps: log_m.exp(),
            max_norm: norms.iter().copied().fold(0.0, f64::max),
            max_inverse_norm: inv_norms.iter().copied().fold(0.0, f64::max),
        })
    }
}

fn growth_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        (sxy / sxx).max(0.0)
    }
}

/// One diagonal block of the reduced system.
#[derive(Clone)]
pub struct Block {
    /// Index of the spectral manifold W_i this block carries.
    pub manifold: usize,
    pub size: usize,
    /// Spectral interval of the block, `None` for W_0 and W_{m+1}.
    pub interval: Option<Interval>,
    pub evolution: Arc<EvolutionOperator>,
    /// Re-scanned spectrum of the block alone.
    pub spectrum: Option<SpectrumResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionDiagnostics {
    /// max off-block entry of S^{-1}(AS − Ṡ) over the cross-check samples.
    pub coupling: f64,
    /// max ‖B_fd − B‖ / max(1, ‖B‖) over the cross-check samples.
    pub crosscheck_defect: f64,
    /// max ‖Φ_A(t,s)S(s) − S(t)Φ_B(t,s)‖ / (‖Φ_A(t,s)‖‖S(s)‖) over random pairs.
    pub similarity_defect: f64,
    pub max_s_norm: f64,
    /// max |interval endpoint − block spectrum endpoint|.
    pub block_spectrum_mismatch: f64,
    pub stages: usize,
    pub omitted_w0: bool,
    pub omitted_wlast: bool,
}

pub struct BlockSystem {
    pub blocks: Vec<Block>,
    pub transform: LyapunovTransform,
    /// Assembled block-diagonal B on the grid.
    pub b: Vec<DMatrix<f64>>,
    pub stages: Vec<Stage>,
    pub diagnostics: ReductionDiagnostics,
}

impl BlockSystem {
    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.size).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    /// Composite S(t) at any time in the window.
    pub fn transform_at(&self, t: f64) -> Result<DMatrix<f64>> {
        compose(&self.stages, t)
    }

    /// Assembled B(t) from the block fields.
    pub fn coefficient_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let parts: Result<Vec<_>> = self.blocks.iter().map(|b| b.evolution.coefficient(t)).collect();
        Ok(linalg::block_diag(&parts?))
    }

    /// Block-diagonal Φ_B(t,s).
    pub fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let parts: Result<Vec<_>> = self.blocks.iter().map(|b| b.evolution.propagate(t, s)).collect();
        Ok(linalg::block_diag(&parts?))
    }
}

fn compose(stages: &[Stage], t: f64) -> Result<DMatrix<f64>> {
    let Some(first) = stages.first() else {
        return Err(Error::Invalid("no reduction stages".into()));
    };
    let n = first.system.dim();
    let mut total = DMatrix::identity(n, n);
    let mut offset = 0;
    for st in stages {
        let d = st.system.dim();
        let local = st.transform_at(t)?;
        let mut embed = DMatrix::identity(n, n);
        embed.view_mut((offset, offset), (d, d)).copy_from(&local);
        total *= embed;
        offset += st.rank;
    }
    Ok(total)
}

/// S^{-1}(A S − Ṡ) at `t` with Ṡ by centered differences.
pub fn conjugate_system<F>(ev: &EvolutionOperator, transform: F, t: f64, delta: f64) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let s = transform(t)?;
    let sp = transform(t + delta)?;
    let sm = transform(t - delta)?;
    let ds = (sp - sm) / (2.0 * delta);
    let a = ev.coefficient(t)?;
    let inv = s.clone().try_inverse().ok_or_else(|| Error::Numerical(format!("S(t) singular at t = {t}")))?;
    Ok(inv * (a * s - ds))
}

/// Split the system at every gap of `spec` into blocks carrying W_0..W_{m+1}.
pub fn block_diagonalize(ev: Arc<EvolutionOperator>, spec: &SpectrumResult, cfg: &ReductionConfig) -> Result<BlockSystem> {
    if !spec.is_bounded() || spec.intervals.is_empty() || spec.gap_midpoints.len() != spec.intervals.len() + 1 {
        return Err(Error::Invalid("reduction needs a bounded spectrum with at least one interval and accepted gaps".into()));
    }
    let grid = *ev.grid();
    let s0 = grid.node(grid.nearest(0.5 * (grid.t0 + grid.t1)));
    let m = spec.intervals.len();

    let mut stages: Vec<Stage> = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();
    let mut current = ev.clone();
    let mut done = false;
    for (i, &gamma) in spec.gap_midpoints.iter().enumerate() {
        let d = current.dim();
        let tester = DichotomyTester::new(&current, &cfg.spectrum)?;
        let proj = tester.estimate_projector(gamma)?;
        let r = proj.rank;
        if r == 0 {
            continue;
        }
        let interval = (i >= 1).then(|| spec.intervals[i - 1]);
        if r == d {
            blocks.push(Block { manifold: i, size: d, interval, evolution: current.clone(), spectrum: None });
            done = true;
            break;
        }
        // a trail still holding several intervals is split again later
        let trail_frame = if i + 1 < m { Frame::Flow } else { Frame::Polar };
        let stage = Stage::new(current.clone(), &proj, grid.nearest(s0), cfg.sigma_floor, trail_frame)?;
        let lead_field: Arc<dyn CoefficientField> = stage.lead.clone().unwrap();
        let trail_field: Arc<dyn CoefficientField> = stage.trail.clone().unwrap();
        let lead_ev = Arc::new(build_on_grid(lead_field, grid, current.tol())?);
        let trail_ev = Arc::new(build_on_grid(trail_field, grid, current.tol())?);
        blocks.push(Block { manifold: i, size: r, interval, evolution: lead_ev, spectrum: None });
        stages.push(stage);
        current = trail_ev;
    }
    if !done {
        let interval = None;
        blocks.push(Block { manifold: m + 1, size: current.dim(), interval, evolution: current.clone(), spectrum: None });
    }
    if stages.is_empty() {
        // a single block: the identity stage
        stages.push(Stage::identity(ev.clone(), s0));
    }

    let sizes: Vec<usize> = blocks.iter().map(|b| b.size).collect();
    let times = grid.nodes();
    let s_grid: Result<Vec<_>> = times.iter().map(|&t| compose(&stages, t)).collect();
    let transform = LyapunovTransform::from_samples(times.clone(), s_grid?)?;
    let b: Result<Vec<_>> = times
        .iter()
        .map(|&t| {
            let parts: Result<Vec<_>> = blocks.iter().map(|bl| bl.evolution.coefficient(t)).collect();
            Ok(linalg::block_diag(&parts?))
        })
        .collect();
    let b = b?;

    // finite-difference cross-check at off-grid points
    let h = grid.h();
    let mut coupling = 0.0f64;
    let mut crosscheck = 0.0f64;
    let mut i = 0;
    while i < grid.steps {
        let t = grid.node(i) + 0.37 * h;
        if t - cfg.fd_step > grid.t0 && t + cfg.fd_step < grid.t1 {
            let fd = conjugate_system(&ev, |u| compose(&stages, u), t, cfg.fd_step)?;
            let parts: Result<Vec<_>> = blocks.iter().map(|bl| bl.evolution.coefficient(t)).collect();
            let exact = linalg::block_diag(&parts?);
            crosscheck = crosscheck.max(spectral_norm(&(&fd - &exact)) / spectral_norm(&exact).max(1.0));
            coupling = coupling.max(off_block_ratio(&fd, &sizes) * fd.amax());
        }
        i += 4;
    }
    if crosscheck > cfg.crosscheck_tol {
        return Err(Error::Numerical(format!(
            "finite-difference cross-check of the reduced coefficients failed: defect {crosscheck:e} > {:e}",
            cfg.crosscheck_tol
        )));
    }

    let mut sys = BlockSystem {
        blocks,
        diagnostics: ReductionDiagnostics {
            coupling,
            crosscheck_defect: crosscheck,
            similarity_defect: 0.0,
            max_s_norm: transform.max_norm,
            block_spectrum_mismatch: 0.0,
            stages: stages.len(),
            omitted_w0: spec.manifold_dims[0] == 0,
            omitted_wlast: spec.manifold_dims[m + 1] == 0,
        },
        transform,
        b,
        stages,
    };
    sys.diagnostics.similarity_defect = similarity_defect(&ev, &sys, cfg.similarity_samples, cfg.seed)?;

    if cfg.verify_blocks {
        let mut mismatch = 0.0f64;
        for block in &mut sys.blocks {
            let tester = DichotomyTester::new(&block.evolution, &cfg.spectrum)?;
            let (lo, hi) = default_gamma_range(&block.evolution)?;
            let res = scan_spectrum(&tester, lo, hi, cfg.tol_gamma)?;
            if let Some(iv) = block.interval {
                let hull = match (res.intervals.first(), res.intervals.last()) {
                    (Some(a), Some(b)) => Interval::new(a.lo, b.hi),
                    _ => Interval::new(f64::NAN, f64::NAN),
                };
                let dev = (hull.lo - iv.lo).abs().max((hull.hi - iv.hi).abs());
                mismatch = mismatch.max(if dev.is_nan() { f64::INFINITY } else { dev });
            }
            block.spectrum = Some(res);
        }
        sys.diagnostics.block_spectrum_mismatch = mismatch;
        if mismatch > 2.0 * cfg.tol_gamma {
            return Err(Error::Numerical(format!(
                "block spectrum differs from its spectral interval by {mismatch:.4} > 2·tol_gamma"
            )));
        }
    }
    Ok(sys)
}

/// max over random pairs of ‖Φ_A(t,s)S(s) − S(t)Φ_B(t,s)‖ / (‖Φ_A(t,s)‖‖S(s)‖).
pub fn similarity_defect(ev: &EvolutionOperator, sys: &BlockSystem, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t0, t1) = ev.window();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let t = rng.gen_range(t0..=t1);
        let s = rng.gen_range(t0..=t1);
        let pa = ev.propagate(t, s)?;
        let pb = sys.propagate(t, s)?;
        let ss = sys.transform_at(s)?;
        let st = sys.transform_at(t)?;
        let d = spectral_norm(&(&pa * &ss - st * pb));
        worst = worst.max(d / (spectral_norm(&pa) * spectral_norm(&ss)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::build_evolution;
    use crate::system::SystemSpec;

    #[test]
    fn normalizer_of_symmetric_projector() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let (t, r) = projector_normalizer(&p).unwrap();
        assert_eq!(r, 1);
        let d = &t * &p * t.clone().try_inverse().unwrap();
        assert!((d - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-10);
        let (t0, r0) = projector_normalizer(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(r0, 0);
        assert!((&t0 * DMatrix::<f64>::zeros(2, 2)).amax() == 0.0);
        assert!(projector_normalizer(&DMatrix::from_element(1, 1, 0.5)).is_err());
    }

    /// P(t) = Φ(t,0) P0 Φ(0,t) on every grid node.
    fn transported(ev: &EvolutionOperator, p0: &DMatrix<f64>) -> ProjectorField {
        let g = ev.grid();
        let nodes: Vec<usize> = (0..g.len()).collect();
        let k0 = g.nearest(0.0);
        let projectors = nodes.iter().map(|&i| ev.propagate_nodes(i, k0) * p0 * ev.propagate_nodes(k0, i)).collect();
        let times = nodes.iter().map(|&i| g.node(i)).collect();
        let rank = p0.trace().round() as usize;
        ProjectorField { nodes, times, projectors, rank, invariance_defect: 0.0 }
    }

    #[test]
    fn zero_system_gives_identity_transform() {
        let ev = Arc::new(build_evolution(Arc::new(SystemSpec::diagonal("z", &[0.0, 0.0])), (-4.0, 4.0), 1e-10).unwrap());
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let field = transported(&ev, &p);
        let st = Stage::new(ev.clone(), &field, ev.grid().nearest(0.0), 1e-12, Frame::Polar).unwrap();
        for &t in &[-3.0, 0.1, 2.5] {
            assert!((st.transform_at(t).unwrap() - DMatrix::identity(2, 2)).amax() < 1e-12);
        }
    }

    #[test]
    fn rotation_stage_has_orthonormal_columns() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let ev = Arc::new(build_evolution(Arc::new(SystemSpec::constant("rot", &a)), (-4.0, 4.0), 1e-10).unwrap());
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let field = transported(&ev, &p);
        let st = Stage::new(ev.clone(), &field, ev.grid().nearest(0.0), 1e-12, Frame::Polar).unwrap();
        for &t in &[-3.0, 1.3] {
            let s = st.transform_at(t).unwrap();
            assert!(spectral_norm(&s) <= 2f64.sqrt() + 1e-9);
            let x = ev.propagate(t, 0.0).unwrap();
            let lhs = &s * &p * s.clone().try_inverse().unwrap();
            let rhs = &x * &p * x.clone().try_inverse().unwrap();
            assert!((lhs - rhs).amax() < 1e-8);
        }
    }
}

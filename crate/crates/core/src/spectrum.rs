//! Dichotomy tests for shifted systems, the γ-scan producing the spectrum,
//! and the spectral filtration.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::linalg::{self, spectral_norm};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumConfig {
    /// Lookahead horizon L; `None` means min(5, window/4).
    pub horizon: Option<f64>,
    /// Relative gap around singular value 1 below which a split is indeterminate.
    pub gap_threshold: f64,
    /// RMS envelope residual (log units) above which a fit is rejected.
    pub residual_threshold: f64,
    /// Shortest |t − s| used in fits.
    pub min_baseline: f64,
    /// Spacing of the (t, s) sample lattice used in fits.
    pub sample_spacing: f64,
    /// Spacing of the coarse γ grid.
    pub coarse_step: f64,
    /// Boundary resolution of the scan.
    pub tol_gamma: f64,
    /// Largest tolerated condition number of the stable/unstable basis.
    pub max_split_condition: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            horizon: None,
            gap_threshold: 0.1,
            residual_threshold: 0.5,
            min_baseline: 0.5,
            sample_spacing: 0.25,
            coarse_step: 0.25,
            tol_gamma: 0.05,
            max_split_condition: 1e8,
        }
    }
}

/// Invariant projector field sampled on grid nodes.
#[derive(Clone, Debug)]
pub struct ProjectorField {
    /// Grid node indices of the evolution operator.
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub projectors: Vec<DMatrix<f64>>,
    pub rank: usize,
    /// max ‖P(t)Φ(t,s) − Φ(t,s)P(s)‖ / (‖Φ(t,s)‖ max(1,‖P‖)) over neighbouring nodes.
    pub invariance_defect: f64,
}

impl ProjectorField {
    /// The same projector at every node.
    pub fn constant(ev: &EvolutionOperator, nodes: Vec<usize>, p: DMatrix<f64>) -> Self {
        let rank = p.trace().round().max(0.0) as usize;
        let times = nodes.iter().map(|&i| ev.grid().node(i)).collect();
        let projectors = vec![p; nodes.len()];
        ProjectorField { nodes, times, projectors, rank, invariance_defect: f64::NAN }
    }

    pub fn at_node(&self, node: usize) -> Option<&DMatrix<f64>> {
        self.nodes.binary_search(&node).ok().map(|k| &self.projectors[k])
    }

    pub fn nearest(&self, t: f64) -> (f64, &DMatrix<f64>) {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        (self.times[k], &self.projectors[k])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DichotomyFit {
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub nu: f64,
    pub stable_residual: f64,
    pub unstable_residual: f64,
    /// Residuals of the same envelopes with μ = ν = 0.
    pub uniform_stable_residual: f64,
    pub uniform_unstable_residual: f64,
}

#[derive(Clone, Debug)]
pub struct DichotomyEstimate {
    pub gamma: f64,
    pub projector: ProjectorField,
    pub fit: DichotomyFit,
    pub accepted: bool,
    pub reason: Option<String>,
}

impl DichotomyEstimate {
    pub fn k(&self) -> f64 {
        self.fit.k
    }
    pub fn alpha(&self) -> f64 {
        self.fit.alpha
    }
    pub fn beta(&self) -> f64 {
        self.fit.beta
    }
    pub fn mu(&self) -> f64 {
        self.fit.mu
    }
    pub fn nu(&self) -> f64 {
        self.fit.nu
    }
}

/// The defining inequalities of a nonuniform exponential dichotomy.
pub fn constraints_hold(f: &DichotomyFit) -> bool {
    f.k >= 1.0
        && f.alpha < 0.0
        && f.beta > 0.0
        && f.mu >= 0.0
        && f.nu >= 0.0
        && f.alpha + f.mu < 0.0
        && f.beta - f.nu > 0.0
        && f.mu.max(f.nu) <= (-f.alpha).min(f.beta)
}

fn constraint_failure(f: &DichotomyFit) -> Option<String> {
    if !(f.alpha < 0.0) {
        return Some(format!("alpha = {:.4} is not negative", f.alpha));
    }
    if !(f.beta > 0.0) {
        return Some(format!("beta = {:.4} is not positive", f.beta));
    }
    if !(f.alpha + f.mu < 0.0) {
        return Some("alpha + mu >= 0".into());
    }
    if !(f.beta - f.nu > 0.0) {
        return Some("beta - nu <= 0".into());
    }
    if !(f.mu.max(f.nu) <= (-f.alpha).min(f.beta)) {
        return Some("max(mu, nu) > min(-alpha, beta)".into());
    }
    None
}

/// γ-independent data shared by every classification of one evolution operator.
pub struct DichotomyTester<'a> {
    ev: &'a EvolutionOperator,
    cfg: SpectrumConfig,
    horizon_steps: usize,
    horizon: f64,
    /// projector grid nodes
    nodes: Vec<usize>,
    fwd_log_sigma: Vec<Vec<f64>>,
    fwd_v: Vec<DMatrix<f64>>,
    bwd_log_sigma: Vec<Vec<f64>>,
    bwd_v: Vec<DMatrix<f64>>,
    /// initial times of fit samples
    s_nodes: Vec<usize>,
    /// sample spacing and shortest baseline, in grid steps
    stride: usize,
    base: usize,
}

impl<'a> DichotomyTester<'a> {
    pub fn new(ev: &'a EvolutionOperator, cfg: &SpectrumConfig) -> Result<Self> {
        let g = *ev.grid();
        let h = g.h();
        let len = g.t1 - g.t0;
        let horizon = cfg.horizon.unwrap_or((len / 4.0).min(5.0));
        let m = (horizon / h).round().max(1.0) as usize;
        if 2 * m >= g.steps {
            return Err(Error::Invalid(format!("window of length {len} too short for horizon {horizon}")));
        }
        let nodes: Vec<usize> = (m..=g.steps - m).collect();

        let per_node: Vec<_> = nodes
            .par_iter()
            .map(|&i| {
                let f = ev.propagate_nodes(i + m, i);
                let b = ev.propagate_nodes(i - m, i);
                let (sf, vf) = linalg::right_singular(&f);
                let (sb, vb) = linalg::right_singular(&b);
                let lf: Vec<f64> = sf.iter().map(|s| s.max(1e-300).ln()).collect();
                let lb: Vec<f64> = sb.iter().map(|s| s.max(1e-300).ln()).collect();
                (lf, vf, lb, vb)
            })
            .collect();
        let mut fwd_log_sigma = Vec::with_capacity(nodes.len());
        let mut fwd_v = Vec::with_capacity(nodes.len());
        let mut bwd_log_sigma = Vec::with_capacity(nodes.len());
        let mut bwd_v = Vec::with_capacity(nodes.len());
        for (lf, vf, lb, vb) in per_node {
            fwd_log_sigma.push(lf);
            fwd_v.push(vf);
            bwd_log_sigma.push(lb);
            bwd_v.push(vb);
        }

        let stride = ((cfg.sample_spacing / h).round() as usize).max(1);
        let base = ((cfg.min_baseline / h).ceil() as usize).max(1);
        let s_nodes: Vec<usize> = nodes.iter().copied().step_by(stride).collect();
        Ok(DichotomyTester {
            ev,
            cfg: cfg.clone(),
            horizon_steps: m,
            horizon: m as f64 * h,
            nodes,
            fwd_log_sigma,
            fwd_v,
            bwd_log_sigma,
            bwd_v,
            s_nodes,
            stride,
            base,
        })
    }

    pub fn config(&self) -> &SpectrumConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn projector_nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn evolution(&self) -> &EvolutionOperator {
        self.ev
    }

    /// Stable span from the forward horizon, unstable span from the backward one.
    pub fn estimate_projector(&self, gamma: f64) -> Result<ProjectorField> {
        let n = self.ev.dim();
        let gl = gamma * self.horizon;
        let thr = self.cfg.gap_threshold;
        // |σ − 1| / max(σ, 1) < thr  ⇔  log σ ∈ (ln(1 − thr), −ln(1 − thr))
        let band = -(1.0 - thr).ln();
        let mut projectors = Vec::with_capacity(self.nodes.len());
        let mut rank = None;
        for (k, &node) in self.nodes.iter().enumerate() {
            let t = self.ev.grid().node(node);
            let lf: Vec<f64> = self.fwd_log_sigma[k].iter().map(|l| l - gl).collect();
            let lb: Vec<f64> = self.bwd_log_sigma[k].iter().map(|l| l + gl).collect();
            if let Some(x) = lf.iter().chain(lb.iter()).find(|l| l.abs() < band) {
                return Err(Error::Indeterminate(format!(
                    "singular value {:.4} within {:.0}% of 1 at t = {t:.3}",
                    x.exp(),
                    thr * 100.0
                )));
            }
            let stable: Vec<usize> = (0..n).filter(|&i| lf[i] < 0.0).collect();
            let unstable: Vec<usize> = (0..n).filter(|&i| lb[i] < 0.0).collect();
            if stable.len() + unstable.len() != n {
                return Err(Error::RankInstability(format!(
                    "stable ({}) and unstable ({}) dimensions do not add up to {n} at t = {t:.3}",
                    stable.len(),
                    unstable.len()
                )));
            }
            match rank {
                None => rank = Some(stable.len()),
                Some(r) if r != stable.len() => {
                    return Err(Error::RankInstability(format!("rank {r} changes to {} at t = {t:.3}", stable.len())))
                }
                _ => {}
            }
            let r = stable.len();
            let p = if r == 0 {
                DMatrix::zeros(n, n)
            } else if r == n {
                DMatrix::identity(n, n)
            } else {
                let mut e = DMatrix::zeros(n, n);
                for (c, &i) in stable.iter().chain(unstable.iter()).enumerate() {
                    let src = if c < r { &self.fwd_v[k] } else { &self.bwd_v[k] };
                    e.set_column(c, &src.column(i));
                }
                let cond = linalg::condition_number(&e);
                if !(cond <= self.cfg.max_split_condition) {
                    return Err(Error::Indeterminate(format!(
                        "stable and unstable spans nearly parallel at t = {t:.3} (condition {cond:.3e})"
                    )));
                }
                let lu = e.clone().lu();
                let d = DMatrix::from_fn(n, n, |i, j| if i == j && i < r { 1.0 } else { 0.0 });
                let einv = lu.try_inverse().ok_or_else(|| Error::Numerical("singular splitting basis".into()))?;
                &e * d * einv
            };
            projectors.push(p);
        }
        let rank = rank.unwrap_or(0);
        let mut defect = 0.0f64;
        for k in 0..self.nodes.len().saturating_sub(1) {
            let step = self.ev.step(self.nodes[k]);
            let (p0, p1) = (&projectors[k], &projectors[k + 1]);
            let d = spectral_norm(&(p1 * step - step * p0));
            let scale = spectral_norm(step) * spectral_norm(p0).max(1.0);
            defect = defect.max(d / scale);
        }
        let times = self.nodes.iter().map(|&i| self.ev.grid().node(i)).collect();
        Ok(ProjectorField { nodes: self.nodes.clone(), times, projectors, rank, invariance_defect: defect })
    }

    /// Envelope fit of both dichotomy bounds for the given projector field.
    pub fn fit_dichotomy(&self, gamma: f64, proj: &ProjectorField) -> Result<DichotomyEstimate> {
        let n = self.ev.dim();
        let grid = self.ev.grid();
        let first = *proj.nodes.first().ok_or_else(|| Error::Invalid("empty projector field".into()))?;
        let last = *proj.nodes.last().unwrap();
        let identity = DMatrix::<f64>::identity(n, n);
        let proj_at = |s: usize, stable: bool| -> Result<DMatrix<f64>> {
            let p = proj.at_node(s).ok_or_else(|| Error::Invalid(format!("projector field has no sample at node {s}")))?;
            Ok(if stable { p.clone() } else { &identity - p })
        };
        // Φ(t,s)P(s) is marched step by step and re-projected with P(t) at each
        // node; otherwise roundoff in P picks up the complementary growth.
        let collect = |stable: bool| -> Result<Vec<Sample>> {
            let per_s: Vec<Result<Vec<Sample>>> = self
                .s_nodes
                .par_iter()
                .filter(|&&s| s >= first && s <= last)
                .map(|&s| {
                    let mut out = Vec::new();
                    let ts = grid.node(s);
                    let mut acc = proj_at(s, stable)?;
                    let targets: Box<dyn Iterator<Item = usize>> =
                        if stable { Box::new(s + 1..=last) } else { Box::new((first..s).rev()) };
                    for t in targets {
                        let step = if stable { self.ev.step(t - 1) } else { self.ev.step_inv(t) };
                        acc = proj_at(t, stable)? * (step * acc);
                        let gap = t.abs_diff(s);
                        if gap >= self.base && gap % self.stride == 0 {
                            let norm = spectral_norm(&acc);
                            if norm > 0.0 {
                                let tt = grid.node(t);
                                out.push(Sample { d: tt - ts, s: ts, y: norm.ln() - gamma * (tt - ts) });
                            }
                        }
                    }
                    Ok(out)
                })
                .collect();
            let mut all = Vec::new();
            for part in per_s {
                all.extend(part?);
            }
            Ok(all)
        };
        let r = proj.rank;
        let stable = if r > 0 { Some(envelope_fit(&collect(true)?)?) } else { None };
        let unstable = if r < n { Some(envelope_fit(&collect(false)?)?) } else { None };
        let fit = match (stable, unstable) {
            (Some(a), Some(b)) => DichotomyFit {
                k: a.log_k.max(b.log_k).exp(),
                alpha: a.rate,
                beta: b.rate,
                mu: a.growth,
                nu: b.growth,
                stable_residual: a.residual,
                unstable_residual: b.residual,
                uniform_stable_residual: a.uniform_residual,
                uniform_unstable_residual: b.uniform_residual,
            },
            // the bound on a trivial subspace holds for any rate; mirror the other side
            (Some(a), None) => DichotomyFit {
                k: a.log_k.exp(),
                alpha: a.rate,
                beta: -a.rate,
                mu: a.growth,
                nu: 0.0,
                stable_residual: a.residual,
                unstable_residual: 0.0,
                uniform_stable_residual: a.uniform_residual,
                uniform_unstable_residual: 0.0,
            },
            (None, Some(b)) => DichotomyFit {
                k: b.log_k.exp(),
                alpha: -b.rate,
                beta: b.rate,
                mu: 0.0,
                nu: b.growth,
                stable_residual: 0.0,
                unstable_residual: b.residual,
                uniform_stable_residual: 0.0,
                uniform_unstable_residual: b.uniform_residual,
            },
            (None, None) => unreachable!("rank is between 0 and n"),
        };
        let mut reason = constraint_failure(&fit);
        let thr = self.cfg.residual_threshold;
        if reason.is_none() && (fit.stable_residual > thr || fit.unstable_residual > thr) {
            reason = Some(format!(
                "envelope residuals ({:.3}, {:.3}) exceed {thr}",
                fit.stable_residual, fit.unstable_residual
            ));
        }
        Ok(DichotomyEstimate { gamma, projector: proj.clone(), accepted: reason.is_none(), reason, fit })
    }

    pub fn classify(&self, gamma: f64) -> ScanPoint {
        match self.estimate_projector(gamma) {
            Err(e) => ScanPoint::failed(gamma, e),
            Ok(p) => match self.fit_dichotomy(gamma, &p) {
                Err(e) => ScanPoint::failed(gamma, e),
                Ok(est) => ScanPoint::from_estimate(est),
            },
        }
    }

    pub fn estimate(&self, gamma: f64) -> Result<DichotomyEstimate> {
        let p = self.estimate_projector(gamma)?;
        self.fit_dichotomy(gamma, &p)
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }
}

struct Sample {
    d: f64,
    s: f64,
    y: f64,
}

struct Envelope {
    rate: f64,
    growth: f64,
    log_k: f64,
    residual: f64,
    uniform_residual: f64,
}

/// Fit `y ≤ log K + rate·d + growth·|s|`.
///
/// The rate is the OLS slope in d (with constant and |s| regressors). Each
/// initial time then gets its worst-case constant `c(s) = max_d (y − rate·d)`;
/// the running maximum of c over increasing |s| is a monotone majorant M, and
/// the growth is the OLS slope of M in |s|, clamped at 0. log K is inflated so
/// the bound holds on every sample; the residual is the RMS gap between the
/// fitted line and M.
fn envelope_fit(samples: &[Sample]) -> Result<Envelope> {
    if samples.len() < 4 {
        return Err(Error::Numerical("too few samples for a dichotomy fit".into()));
    }
    let rows = samples.len();
    let x = DMatrix::from_fn(rows, 3, |i, j| match j {
        0 => 1.0,
        1 => samples[i].d,
        _ => samples[i].s.abs(),
    });
    let y = DVector::from_iterator(rows, samples.iter().map(|p| p.y));
    let rate = match linalg::least_squares(&x, &y) {
        Ok(beta) => beta[1],
        // all samples share one |s|: drop that regressor
        Err(_) => {
            let x2 = x.columns(0, 2).into_owned();
            linalg::least_squares(&x2, &y)?[1]
        }
    };

    // worst-case constant per initial time, keyed by the bit pattern of s
    let mut worst: HashMap<u64, (f64, f64)> = HashMap::new();
    for p in samples {
        let c = p.y - rate * p.d;
        let e = worst.entry(p.s.to_bits()).or_insert((p.s.abs(), c));
        if c > e.1 {
            e.1 = c;
        }
    }
    let mut per_s: Vec<(f64, f64)> = worst.into_values().collect();
    per_s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut majorant = Vec::with_capacity(per_s.len());
    let mut run = f64::NEG_INFINITY;
    for &(r, c) in &per_s {
        run = run.max(c);
        majorant.push((r, run));
    }

    let growth = if majorant.len() >= 2 && majorant.first().unwrap().0 < majorant.last().unwrap().0 {
        let xm = DMatrix::from_fn(majorant.len(), 2, |i, j| if j == 0 { 1.0 } else { majorant[i].0 });
        let ym = DVector::from_iterator(majorant.len(), majorant.iter().map(|m| m.1));
        linalg::least_squares(&xm, &ym).map(|b| b[1].max(0.0)).unwrap_or(0.0)
    } else {
        0.0
    };
    let log_k = per_s.iter().map(|&(r, c)| c - growth * r).fold(0.0f64, f64::max);
    let rms = |g: f64, lk: f64| -> f64 {
        let ss: f64 = majorant.iter().map(|&(r, m)| (lk + g * r - m).powi(2)).sum();
        (ss / majorant.len() as f64).sqrt()
    };
    let residual = rms(growth, log_k);
    let log_k0 = per_s.iter().map(|&(_, c)| c).fold(0.0f64, f64::max);
    let uniform_residual = rms(0.0, log_k0);
    Ok(Envelope { rate, growth, log_k, residual, uniform_residual })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected,
    Indeterminate,
}

/// Result of classifying one shift γ.
#[derive(Clone, Debug, Serialize)]
pub struct ScanPoint {
    pub gamma: f64,
    pub verdict: Verdict,
    pub rank: Option<usize>,
    pub fit: Option<DichotomyFit>,
    pub reason: Option<String>,
    #[serde(skip)]
    pub estimate: Option<Box<DichotomyEstimate>>,
}

impl ScanPoint {
    fn failed(gamma: f64, e: Error) -> Self {
        let verdict = match e {
            Error::Indeterminate(_) => Verdict::Indeterminate,
            _ => Verdict::Rejected,
        };
        ScanPoint { gamma, verdict, rank: None, fit: None, reason: Some(e.to_string()), estimate: None }
    }

    fn from_estimate(est: DichotomyEstimate) -> Self {
        ScanPoint {
            gamma: est.gamma,
            verdict: if est.accepted { Verdict::Accepted } else { Verdict::Rejected },
            rank: Some(est.projector.rank),
            fit: Some(est.fit.clone()),
            reason: est.reason.clone(),
            estimate: Some(Box::new(est)),
        }
    }

    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }
    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GapEstimate {
    pub gamma: f64,
    pub rank: usize,
    pub fit: DichotomyFit,
    #[serde(skip)]
    pub estimate: DichotomyEstimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumResult {
    pub dimension: usize,
    pub range: [f64; 2],
    pub tol_gamma: f64,
    pub horizon: f64,
    pub intervals: Vec<Interval>,
    pub unbounded_low: bool,
    pub unbounded_high: bool,
    /// Shifts γ_0..γ_m inside the gaps (empty when unbounded).
    pub gap_midpoints: Vec<f64>,
    /// dim W_0 .. dim W_{m+1}.
    pub manifold_dims: Vec<usize>,
    pub gaps: Vec<GapEstimate>,
    /// Rejected runs without a rank jump, dropped from the spectrum.
    pub spurious: Vec<Interval>,
    pub points: Vec<ScanPoint>,
}

impl SpectrumResult {
    pub fn is_bounded(&self) -> bool {
        !self.unbounded_low && !self.unbounded_high
    }

    /// Estimated nonuniformity: largest μ, ν over the gap estimates.
    pub fn max_nonuniformity(&self) -> f64 {
        self.gaps.iter().map(|g| g.fit.mu.max(g.fit.nu)).fold(0.0, f64::max)
    }
}

/// Default γ range from a bound on the logarithmic norm of ±A over the grid.
pub fn default_gamma_range(ev: &EvolutionOperator) -> Result<(f64, f64)> {
    let mut a = 0.0f64;
    for &t in &ev.grid().nodes() {
        let m = ev.coefficient(t)?;
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen().eigenvalues;
        a = a.max(eig.max().abs()).max(eig.min().abs());
    }
    Ok((-a - 1.0, a + 1.0))
}

/// Coarse classification, bisection of every boundary and rank jump, then
/// assembly of intervals, gaps and manifold dimensions.
pub fn scan_spectrum(tester: &DichotomyTester<'_>, lo: f64, hi: f64, tol_gamma: f64) -> Result<SpectrumResult> {
    if !(lo < hi) {
        return Err(Error::Invalid(format!("empty γ range [{lo}, {hi}]")));
    }
    if !(tol_gamma > 0.0) {
        return Err(Error::Invalid("tol_gamma must be positive".into()));
    }
    let n = tester.evolution().dim();
    let cfg = tester.config();
    let coarse = ((hi - lo) / cfg.coarse_step).ceil().max(2.0) as usize;
    let gammas: Vec<f64> = (0..=coarse).map(|k| if k == coarse { hi } else { lo + (hi - lo) * k as f64 / coarse as f64 }).collect();
    let mut points: Vec<ScanPoint> = gammas.par_iter().map(|&g| tester.classify(g)).collect();

    let target = 0.5 * tol_gamma;
    loop {
        let mut todo = Vec::new();
        for w in points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.gamma - a.gamma <= target {
                continue;
            }
            let boundary = a.accepted() != b.accepted();
            let jump = a.accepted() && b.accepted() && a.rank != b.rank;
            if boundary || jump {
                todo.push(0.5 * (a.gamma + b.gamma));
            }
        }
        if todo.is_empty() {
            break;
        }
        let fresh: Vec<ScanPoint> = todo.par_iter().map(|&g| tester.classify(g)).collect();
        points.extend(fresh);
        points.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    }

    let accepted: Vec<&ScanPoint> = points.iter().filter(|p| p.accepted()).collect();
    for w in accepted.windows(2) {
        if w[1].rank < w[0].rank {
            return Err(Error::Numerical(format!(
                "inconsistent rank monotonicity: rank {:?} at γ = {} but {:?} at γ = {}",
                w[0].rank, w[0].gamma, w[1].rank, w[1].gamma
            )));
        }
    }

    let unbounded_low = !points.first().unwrap().accepted();
    let unbounded_high = !points.last().unwrap().accepted();

    // (interval, rank before, rank after)
    let mut raw: Vec<(Interval, Option<usize>, Option<usize>)> = Vec::new();
    let mut k = 0;
    while k < points.len() {
        if points[k].accepted() {
            if k + 1 < points.len() && points[k + 1].accepted() && points[k + 1].rank != points[k].rank {
                raw.push((Interval::new(points[k].gamma, points[k + 1].gamma), points[k].rank, points[k + 1].rank));
            }
            k += 1;
            continue;
        }
        let start = k;
        while k < points.len() && !points[k].accepted() {
            k += 1;
        }
        let before = start.checked_sub(1).map(|i| &points[i]);
        let after = points.get(k);
        let a = before.map(|b| 0.5 * (b.gamma + points[start].gamma)).unwrap_or(lo);
        let b = after.map(|x| 0.5 * (points[k - 1].gamma + x.gamma)).unwrap_or(hi);
        raw.push((Interval::new(a, b), before.and_then(|p| p.rank), after.and_then(|p| p.rank)));
    }

    let mut intervals = Vec::new();
    let mut spurious = Vec::new();
    let mut jumps = Vec::new();
    for (iv, r0, r1) in raw {
        match (r0, r1) {
            (Some(a), Some(b)) if a == b => spurious.push(iv),
            _ => {
                intervals.push(iv);
                jumps.push((r0, r1));
            }
        }
    }

    let mut manifold_dims = Vec::new();
    let mut gap_midpoints = Vec::new();
    let mut gaps = Vec::new();
    if !unbounded_low && !unbounded_high {
        let first_rank = accepted.first().and_then(|p| p.rank).unwrap_or(0);
        manifold_dims.push(first_rank);
        for (r0, r1) in &jumps {
            manifold_dims.push(r1.unwrap_or(0) - r0.unwrap_or(0));
        }
        let last_rank = accepted.last().and_then(|p| p.rank).unwrap_or(0);
        manifold_dims.push(n - last_rank);

        let mut bounds = vec![lo];
        for iv in &intervals {
            bounds.push(iv.lo);
            bounds.push(iv.hi);
        }
        bounds.push(hi);
        for pair in bounds.chunks(2) {
            let (glo, ghi) = (pair[0], pair[1]);
            let mid = 0.5 * (glo + ghi);
            let mut chosen = tester.classify(mid);
            if !chosen.accepted() {
                // fall back to the accepted scan point in this gap closest to its middle
                chosen = points
                    .iter()
                    .filter(|p| p.accepted() && p.gamma >= glo && p.gamma <= ghi)
                    .min_by(|a, b| (a.gamma - mid).abs().total_cmp(&(b.gamma - mid).abs()))
                    .cloned()
                    .ok_or_else(|| Error::Numerical(format!("no accepted shift in gap [{glo}, {ghi}]")))?;
            }
            let est = *chosen.estimate.clone().expect("accepted points carry estimates");
            gap_midpoints.push(chosen.gamma);
            gaps.push(GapEstimate { gamma: chosen.gamma, rank: est.projector.rank, fit: est.fit.clone(), estimate: est });
        }
    }

    Ok(SpectrumResult {
        dimension: n,
        range: [lo, hi],
        tol_gamma,
        horizon: tester.horizon(),
        intervals,
        unbounded_low,
        unbounded_high,
        gap_midpoints,
        manifold_dims,
        gaps,
        spurious,
        points,
    })
}

/// Basis fields of the spectral manifolds W_0..W_{m+1}.
#[derive(Clone, Debug)]
pub struct Filtration {
    pub times: Vec<f64>,
    /// `bases[i][k]`: orthonormal basis (n × n_i) of W_i at `times[k]`.
    pub bases: Vec<Vec<DMatrix<f64>>>,
    pub dims: Vec<usize>,
    /// Largest condition number of the stacked bases over the grid.
    pub whitney_condition: f64,
    /// Largest containment gap Im P_{γ_i} ⊄ Im P_{γ_{i+1}} over the grid.
    pub monotonicity_defect: f64,
}

/// W_i = Im P_{γ_i} ∩ Ker P_{γ_{i−1}}, with W_0 = Im P_{γ_0} and W_{m+1} = Ker P_{γ_m}.
pub fn spectral_filtration(spec: &SpectrumResult, angle_tol: f64) -> Result<Filtration> {
    if !spec.is_bounded() || spec.gaps.is_empty() {
        return Err(Error::Invalid("spectral filtration needs a bounded spectrum with gap estimates".into()));
    }
    let fields: Vec<&ProjectorField> = spec.gaps.iter().map(|g| &g.estimate.projector).collect();
    let times = fields[0].times.clone();
    let n = spec.dimension;
    let m = spec.intervals.len();
    let mut bases = vec![Vec::with_capacity(times.len()); m + 2];
    let mut whitney = 1.0f64;
    let mut mono = 0.0f64;
    for k in 0..times.len() {
        let im: Vec<DMatrix<f64>> = fields.iter().map(|f| linalg::column_basis(&f.projectors[k], f.rank)).collect();
        let ker: Vec<DMatrix<f64>> = fields.iter().map(|f| linalg::null_basis(&f.projectors[k], f.rank)).collect();
        for i in 0..m {
            mono = mono.max(linalg::containment_gap(&im[i], &im[i + 1]));
        }
        let mut stacked = DMatrix::zeros(n, 0);
        for i in 0..m + 2 {
            let w = if i == 0 {
                im[0].clone()
            } else if i == m + 1 {
                ker[m].clone()
            } else {
                intersect(&im[i], &ker[i - 1], angle_tol)
            };
            if w.ncols() != spec.manifold_dims[i] {
                return Err(Error::Numerical(format!(
                    "W_{i} has dimension {} at t = {:.3}, expected {}",
                    w.ncols(),
                    times[k],
                    spec.manifold_dims[i]
                )));
            }
            let c = stacked.ncols();
            stacked = stacked.insert_columns(c, w.ncols(), 0.0);
            stacked.view_mut((0, c), (n, w.ncols())).copy_from(&w);
            bases[i].push(w);
        }
        whitney = whitney.max(linalg::condition_number(&stacked));
    }
    Ok(Filtration { times, bases, dims: spec.manifold_dims.clone(), whitney_condition: whitney, monotonicity_defect: mono })
}

/// Orthonormal basis of span(a) ∩ span(b) for orthonormal a, b.
fn intersect(a: &DMatrix<f64>, b: &DMatrix<f64>, angle_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 || b.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let s = linalg::svd_sorted(&(a.transpose() * b));
    let keep = s.sigma.iter().take_while(|&&c| c > 1.0 - angle_tol).count();
    let mut w = a * s.u.columns(0, keep);
    linalg::canonical_signs(&mut w);
    w
}

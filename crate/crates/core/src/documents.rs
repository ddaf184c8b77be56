//! JSON documents and CSV grids for the pipeline stages.

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::normalform::{to_vecpoly, NormalFormResult, ResidualReport};
use crate::reduction::BlockSystem;
use crate::report::{fmt_f64, grid_csv, RunManifest};
use crate::spectrum::{SpectrumResult, Verdict};

/// μ or ν above this marks a fit as nonuniform in reports.
pub const NONUNIFORM_FLOOR: f64 = 0.02;

pub fn spectrum_document(manifest: &RunManifest, spec: &SpectrumResult) -> Value {
    let nonuniformity = spec.max_nonuniformity();
    let indeterminate = spec.points.iter().filter(|p| p.verdict == Verdict::Indeterminate).count();
    json!({
        "manifest": manifest,
        "summary": {
            "intervals": spec.intervals.iter().enumerate().map(|(i, iv)| json!({
                "lo": iv.lo,
                "hi": iv.hi,
                "dimension": spec.manifold_dims.get(i + 1),
            })).collect::<Vec<_>>(),
            "bounded": spec.is_bounded(),
            "max_nonuniformity": nonuniformity,
            "nonuniform": nonuniformity > NONUNIFORM_FLOOR,
            "indeterminate_points": indeterminate,
        },
        "spectrum": spec,
    })
}

/// One row per scanned γ.
pub fn classification_csv(spec: &SpectrumResult) -> String {
    let mut out = String::from("gamma,verdict,rank,k,alpha,beta,mu,nu,reason\n");
    for p in &spec.points {
        let verdict = match p.verdict {
            Verdict::Accepted => "accepted",
            Verdict::Rejected => "rejected",
            Verdict::Indeterminate => "indeterminate",
        };
        let rank = p.rank.map(|r| r.to_string()).unwrap_or_default();
        let fit = match &p.fit {
            Some(f) => [f.k, f.alpha, f.beta, f.mu, f.nu].iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","),
            None => ",,,,".to_string(),
        };
        let reason = p.reason.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!("{},{verdict},{rank},{fit},{reason}\n", fmt_f64(p.gamma)));
    }
    out
}

pub fn reduction_document(manifest: &RunManifest, sys: &BlockSystem) -> Value {
    let t = &sys.transform;
    json!({
        "manifest": manifest,
        "block_sizes": sys.block_sizes(),
        "single_block": sys.blocks.len() == 1,
        "blocks": sys.blocks.iter().map(|b| json!({
            "manifold": b.manifold,
            "size": b.size,
            "interval": b.interval,
            "block_spectrum": b.spectrum.as_ref().map(|s| &s.intervals),
        })).collect::<Vec<_>>(),
        "transform": {
            "epsilon": t.epsilon,
            "m_eps": t.m_eps,
            "max_norm": t.max_norm,
            "max_inverse_norm": t.max_inverse_norm,
        },
        "diagnostics": sys.diagnostics,
    })
}

fn matrix_header(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            h.push(format!("{prefix}_{}_{}", i + 1, j + 1));
        }
    }
    h
}

/// Row-major matrix samples as CSV.
pub fn matrix_grid_csv(prefix: &str, times: &[f64], values: &[DMatrix<f64>]) -> String {
    let (r, c) = values.first().map(|m| m.shape()).unwrap_or((0, 0));
    let rows: Vec<(f64, Vec<f64>)> = times
        .iter()
        .zip(values)
        .map(|(t, m)| (*t, (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect()))
        .collect();
    grid_csv(&matrix_header(prefix, r, c), &rows)
}

/// Reference node for coefficient listings: the center of the top-degree
/// valid region, or the window center.
pub fn reference_node(nf: &NormalFormResult) -> usize {
    let times = &nf.times;
    let valid = nf.degrees.last().and_then(|d| d.valid);
    let target = match valid {
        Some([lo, hi]) => 0.5 * (lo + hi),
        None => 0.5 * (times[0] + times[times.len() - 1]),
    };
    times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn coefficient_list(basis: &crate::polyops::MultiIndexBasis, v: &nalgebra::DVector<f64>, floor: f64) -> Vec<Value> {
    let polys = to_vecpoly(basis, v);
    let mut out = Vec::new();
    for (c, p) in polys.iter().enumerate() {
        for (m, val) in &p.terms {
            if val.abs() > floor {
                out.push(json!({ "component": c + 1, "monomial": m, "value": val }));
            }
        }
    }
    out
}

/// Coefficients below this are omitted from listings.
pub const LISTING_FLOOR: f64 = 1e-12;

pub fn normal_form_document(manifest: &RunManifest, nf: &NormalFormResult, residual: Option<&ResidualReport>) -> Value {
    let i = reference_node(nf);
    json!({
        "manifest": manifest,
        "max_degree": nf.max_degree,
        "block_sizes": nf.block_sizes,
        "intervals": nf.intervals,
        "reference_time": nf.times[i],
        "degrees": nf.degrees.iter().map(|d| json!({
            "degree": d.k,
            "valid": d.valid,
            "resonances": d.table.entries,
            "blocks": d.blocks,
            "h": coefficient_list(&d.basis, &d.h.values[i], LISTING_FLOOR),
            "g": coefficient_list(&d.basis, &d.g.values[i], LISTING_FLOOR),
        })).collect::<Vec<_>>(),
        "theorem": nf.theorem,
        "decay": nf.decay,
        "warnings": nf.warnings,
        "residual": residual,
    })
}

/// Coefficient grid of one degree as CSV, columns `<name>_<component>_<monomial>`.
pub fn coefficient_grid_csv(name: &str, nf: &NormalFormResult, k: u32, use_g: bool) -> Option<String> {
    let d = nf.degree(k)?;
    let n = d.basis.n;
    let header: Vec<String> = d
        .basis
        .indices
        .iter()
        .flat_map(|m| {
            let tag = m.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("");
            (0..n).map(move |c| format!("{name}_{}_{tag}", c + 1))
        })
        .collect();
    let grid = if use_g { &d.g.values } else { &d.h.values };
    let rows: Vec<(f64, Vec<f64>)> = nf.times.iter().zip(grid).map(|(t, v)| (*t, v.iter().copied().collect())).collect();
    Some(grid_csv(&header, &rows))
}

//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Operator 2-norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if r == 1 || c == 1 {
        return m.norm();
    }
    if r == 2 && c == 2 {
        let scale = m.amax();
        if scale == 0.0 || !scale.is_finite() {
            return scale;
        }
        let (a, b, cc, d) = (m[(0, 0)] / scale, m[(0, 1)] / scale, m[(1, 0)] / scale, m[(1, 1)] / scale);
        // eigenvalues of MᵀM
        let p = a * a + cc * cc;
        let q = a * b + cc * d;
        let s = b * b + d * d;
        let half = 0.5 * (p + s);
        let rad = (0.25 * (p - s) * (p - s) + q * q).sqrt();
        return scale * (half + rad).max(0.0).sqrt();
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), k, |r, c| vt[(order[c], r)]);
    SortedSvd { u, sigma, v }
}

/// Full right-singular basis of a square matrix, sorted by decreasing singular value.
pub fn right_singular(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let s = svd_sorted(m);
    (s.sigma, s.v)
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn canonical_signs(m: &mut DMatrix<f64>) {
    for c in 0..m.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for r in 0..m.nrows() {
            let v = m[(r, c)];
            if v.abs() > best + 1e-12 {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            m.column_mut(c).neg_mut();
        }
    }
}

/// Orthonormal basis (n×r) of the column span of `m`, assuming rank `r`.
pub fn column_basis(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    if r == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let s = svd_sorted(m);
    let mut b = s.u.columns(0, r).into_owned();
    canonical_signs(&mut b);
    b
}

/// Orthonormal basis (n×(n−r)) of the null space of a square `m` of rank `r`.
pub fn null_basis(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = m.ncols();
    if r == n {
        return DMatrix::zeros(n, 0);
    }
    let s = svd_sorted(m);
    // square input: v is n×n
    let mut b = s.v.columns(r, n - r).into_owned();
    canonical_signs(&mut b);
    b
}

/// Polar factor of a full-column-rank `x` (d×r): `x = S R` with `SᵀS = I` and
/// `R = (xᵀx)^{1/2}`. Returns `(S, sigma, V)` with `R = V diag(sigma) Vᵀ`.
pub fn polar(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let s = svd_sorted(x);
    let polar = &s.u * s.v.transpose();
    (polar, s.sigma, s.v)
}

/// Principal square root of a symmetric positive-definite matrix.
///
/// Fails when the smallest eigenvalue falls below `floor` times the largest.
pub fn sqrt_spd(q: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min < floor * max {
        return Err(Error::Numerical(format!(
            "matrix not numerically positive definite (eigenvalues {min:e} .. {max:e})"
        )));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Cosines of the principal angles between two orthonormal bases, decreasing.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    if a.ncols() == 0 || b.ncols() == 0 {
        return Vec::new();
    }
    let m = a.transpose() * b;
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Largest sine of principal angles from span(a) into span(b): 0 iff span(a) ⊆ span(b).
pub fn containment_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    if b.ncols() == 0 {
        return 1.0;
    }
    // residual of projecting a onto span(b)
    let r = a - b * (b.transpose() * a);
    spectral_norm(&r)
}

/// Condition number in the 2-norm; infinite for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let s = m.clone().svd(false, false).singular_values;
    let (max, min) = (s.max(), s.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Ordinary least squares `y ≈ X β` via SVD; errors when `X` is rank-deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let s = &svd.singular_values;
    let max = s.max();
    if s.iter().any(|&v| v <= 1e-10 * max) || max == 0.0 {
        return Err(Error::Numerical("least-squares design matrix is rank-deficient".into()));
    }
    svd.solve(y, 0.0).map_err(|e| Error::Numerical(e.to_string()))
}

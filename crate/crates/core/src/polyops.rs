//! Multi-index bases of homogeneous polynomials, Kronecker products and the
//! lifted operators acting on polynomial coefficient vectors.
//!
//! Coefficient vectors of degree-k vector polynomials `h(x) = Σ_σ h_σ x^σ`
//! with values in ℝ^d are laid out as `index = pos(σ)·d + component`, so the
//! linear part acts as `I_D ⊗ A` and a derivation acting on monomials acts as
//! `T ⊗ I_d`.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::poly::{Monomial, Poly};

/// Largest admissible D·n.
pub const DEFAULT_SIZE_CAP: usize = 20_000;

/// Degree-k multi-indices over n variables, graded-lex order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiIndexBasis {
    pub n: usize,
    pub k: u32,
    pub indices: Vec<Monomial>,
    position: HashMap<Monomial, usize>,
}

impl MultiIndexBasis {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn position(&self, m: &[u32]) -> Option<usize> {
        self.position.get(m).copied()
    }

    /// One multi-index per line, prefixed by its position.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.indices.iter().enumerate() {
            let parts: Vec<String> = m.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!("{i}\t({})\n", parts.join(",")));
        }
        out
    }

    /// Coefficients of a homogeneous polynomial of this degree.
    pub fn coefficients(&self, p: &Poly) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        for (m, v) in &p.terms {
            let i = self
                .position(m)
                .ok_or_else(|| Error::Invalid(format!("monomial {m:?} is not of degree {}", self.k)))?;
            out[i] = *v;
        }
        Ok(out)
    }
}

/// C(n, k) with overflow reported as `None`.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// dim H_{n,k} = C(n+k−1, k).
pub fn basis_dim(n: usize, k: u32) -> Option<usize> {
    if n == 0 {
        return Some(if k == 0 { 1 } else { 0 });
    }
    binomial((n + k as usize - 1) as u64, k as u64).and_then(|v| usize::try_from(v).ok())
}

fn check_cap(what: &str, needed: Option<usize>, cap: usize) -> Result<usize> {
    match needed {
        Some(v) if v <= cap => Ok(v),
        Some(v) => Err(Error::SizeCap { what: what.into(), needed: v, cap }),
        None => Err(Error::SizeCap { what: what.into(), needed: usize::MAX, cap }),
    }
}

pub fn enumerate_basis(n: usize, k: u32) -> Result<MultiIndexBasis> {
    enumerate_basis_capped(n, k, DEFAULT_SIZE_CAP)
}

/// Enumerate H_{n,k} with the guard D·n ≤ cap.
pub fn enumerate_basis_capped(n: usize, k: u32, cap: usize) -> Result<MultiIndexBasis> {
    if n == 0 {
        return Err(Error::Invalid("basis needs at least one variable".into()));
    }
    let d = basis_dim(n, k);
    check_cap("basis size D·n", d.and_then(|d| d.checked_mul(n)), cap)?;
    let mut indices = Vec::with_capacity(d.unwrap_or(0));
    let mut cur = vec![0u32; n];
    fill(&mut indices, &mut cur, 0, k);
    let position = indices.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
    Ok(MultiIndexBasis { n, k, indices, position })
}

// leading exponent runs from high to low: descending lexicographic order
fn fill(out: &mut Vec<Monomial>, cur: &mut Monomial, i: usize, left: u32) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[i] = e;
        fill(out, cur, i + 1, left - e);
    }
    cur[i] = 0;
}

/// Collapse a multi-index over n variables to block weights.
pub fn group_map(l: &[u32], block_sizes: &[usize]) -> Vec<u32> {
    let mut out = Vec::with_capacity(block_sizes.len());
    let mut o = 0;
    for &b in block_sizes {
        out.push(l[o..o + b].iter().sum());
        o += b;
    }
    out
}

/// Positions of the basis indices whose group image is `tau`, in basis order.
pub fn group_positions(basis: &MultiIndexBasis, block_sizes: &[usize], tau: &[u32]) -> Vec<usize> {
    basis
        .indices
        .iter()
        .enumerate()
        .filter(|(_, m)| group_map(m, block_sizes) == tau)
        .map(|(i, _)| i)
        .collect()
}

/// q_τ = Π C(τ_i + n_i − 1, τ_i).
pub fn group_size(tau: &[u32], block_sizes: &[usize]) -> usize {
    tau.iter().zip(block_sizes).map(|(&t, &n)| basis_dim(n, t).unwrap_or(usize::MAX)).product()
}

/// Kronecker product with the block layout `a_ij · B`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = a.nrows().checked_mul(b.nrows());
    let cols = a.ncols().checked_mul(b.ncols());
    check_cap("Kronecker rows", rows, DEFAULT_SIZE_CAP)?;
    check_cap("Kronecker columns", cols, DEFAULT_SIZE_CAP)?;
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = DMatrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * r, j * s), (r, s)).copy_from(&(b * aij));
            }
        }
    }
    Ok(out)
}

/// det(A ⊗ B) = det(A)^{dim B} · det(B)^{dim A} for square A, B.
pub fn kronecker_det(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (p, q) = (a.nrows() as i32, b.nrows() as i32);
    a.determinant().powi(q) * b.determinant().powi(p)
}

/// Coefficient columns of the polynomials `(Ax)^σ` for the given σ, restricted to `rows`.
fn lift_columns(a: &DMatrix<f64>, basis: &MultiIndexBasis, cols: &[usize], rows: &[usize]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let lin: Vec<Poly> = (0..n).map(|i| Poly::linear(&a.row(i).iter().copied().collect::<Vec<_>>())).collect();
    // powers (A x)_i^e, reused across columns
    let mut powers: Vec<Vec<Poly>> = lin.iter().map(|p| vec![Poly::constant(n, 1.0), p.clone()]).collect();
    let row_of: HashMap<usize, usize> = rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (c, &pos) in cols.iter().enumerate() {
        let sigma = &basis.indices[pos];
        let mut prod = Poly::constant(n, 1.0);
        for (i, &e) in sigma.iter().enumerate() {
            while powers[i].len() <= e as usize {
                let next = powers[i].last().unwrap() * &lin[i];
                powers[i].push(next);
            }
            prod = &prod * &powers[i][e as usize];
        }
        for (m, v) in &prod.terms {
            let p = basis.position(m).expect("product of linear forms is homogeneous of the basis degree");
            if let Some(&r) = row_of.get(&p) {
                out[(r, c)] = *v;
            }
        }
    }
    Ok(out)
}

/// N(A)_k: column σ holds the coefficients of `(Ax)^σ`.
pub fn lift_matrix(a: &DMatrix<f64>, k: u32) -> Result<DMatrix<f64>> {
    square(a)?;
    let basis = enumerate_basis(a.nrows(), k)?;
    let all: Vec<usize> = (0..basis.len()).collect();
    lift_columns(a, &basis, &all, &all)
}

/// Diagonal block N(A)_τ of the lift of a block-diagonal A.
pub fn lift_block(a: &DMatrix<f64>, k: u32, block_sizes: &[usize], tau: &[u32]) -> Result<DMatrix<f64>> {
    square(a)?;
    let basis = enumerate_basis(a.nrows(), k)?;
    let pos = group_positions(&basis, block_sizes, tau);
    lift_columns(a, &basis, &pos, &pos)
}

/// T(A)_k: matrix of h ↦ (∂h/∂x)·Ax on scalar degree-k polynomials.
pub fn lift_derivation(a: &DMatrix<f64>, k: u32) -> Result<DMatrix<f64>> {
    square(a)?;
    let n = a.nrows();
    let basis = enumerate_basis(n, k)?;
    let d = basis.len();
    let mut t = DMatrix::zeros(d, d);
    for (c, sigma) in basis.indices.iter().enumerate() {
        for i in 0..n {
            if sigma[i] == 0 {
                continue;
            }
            for j in 0..n {
                let aij = a[(i, j)];
                if aij == 0.0 {
                    continue;
                }
                let mut m = sigma.clone();
                m[i] -= 1;
                m[j] += 1;
                let r = basis.position(&m).expect("degree is preserved");
                t[(r, c)] += sigma[i] as f64 * aij;
            }
        }
    }
    Ok(t)
}

/// L_k = I_D ⊗ A − T(A)_k ⊗ I_n.
pub fn homological_operator(a: &DMatrix<f64>, k: u32) -> Result<DMatrix<f64>> {
    square(a)?;
    let n = a.nrows();
    let t = lift_derivation(a, k)?;
    let d = t.nrows();
    Ok(kronecker(&DMatrix::identity(d, d), a)? - kronecker(&t, &DMatrix::identity(n, n))?)
}

/// Positions inside the (Dn)-vector of the (τ, j) sub-block, τ-major.
pub fn block_coordinates(basis: &MultiIndexBasis, block_sizes: &[usize], tau: &[u32], j: usize) -> Vec<usize> {
    let n = basis.n;
    let off: usize = block_sizes[..j].iter().sum();
    let mut out = Vec::new();
    for p in group_positions(basis, block_sizes, tau) {
        for i in 0..block_sizes[j] {
            out.push(p * n + off + i);
        }
    }
    out
}

/// Diagonal block `j` of a matrix split by `block_sizes`.
pub fn diagonal_block(m: &DMatrix<f64>, block_sizes: &[usize], j: usize) -> DMatrix<f64> {
    let off: usize = block_sizes[..j].iter().sum();
    m.view((off, off), (block_sizes[j], block_sizes[j])).into_owned()
}

/// Largest off-block entry relative to the largest entry.
pub fn off_block_ratio(m: &DMatrix<f64>, block_sizes: &[usize]) -> f64 {
    let mut owner = Vec::with_capacity(m.nrows());
    for (b, &s) in block_sizes.iter().enumerate() {
        owner.extend(std::iter::repeat(b).take(s));
    }
    let mut off = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if owner[i] != owner[j] {
                off = off.max(m[(i, j)].abs());
            }
        }
    }
    off / m.amax().max(f64::MIN_POSITIVE)
}

/// Φ_{L_k}^{(τ,j)}(t,s) = N(Φ_A(s,t))_τ ⊗ Φ_{A_j}(t,s) for block-diagonal A.
pub fn evolution_factorization(
    ev: &EvolutionOperator,
    block_sizes: &[usize],
    k: u32,
    tau: &[u32],
    j: usize,
    t: f64,
    s: f64,
) -> Result<DMatrix<f64>> {
    check_blocks(block_sizes, ev.dim(), tau, j)?;
    for &x in &[t, s, 0.5 * (t + s)] {
        let a = ev.coefficient(x)?;
        if off_block_ratio(&a, block_sizes) > 1e-12 {
            return Err(Error::Invalid(format!("coefficient matrix is not block diagonal at t = {x}")));
        }
    }
    let back = ev.propagate(s, t)?;
    let fwd = ev.propagate(t, s)?;
    factorized_block(&back, &fwd, block_sizes, k, tau, j)
}

/// The (τ, j) block from precomputed Φ_A(s,t) and Φ_A(t,s).
pub fn factorized_block(
    back: &DMatrix<f64>,
    fwd: &DMatrix<f64>,
    block_sizes: &[usize],
    k: u32,
    tau: &[u32],
    j: usize,
) -> Result<DMatrix<f64>> {
    let n_tau = lift_block(back, k, block_sizes, tau)?;
    kronecker(&n_tau, &diagonal_block(fwd, block_sizes, j))
}

/// Constant c in ‖N(A)_τ‖ ≤ c Π ‖A_i‖^{τ_i}.
pub fn lift_norm_constant(n: usize, k: u32, q_tau: usize) -> f64 {
    (q_tau as f64).sqrt() * (n as f64).powf(k as f64 / 2.0)
}

fn square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Invalid(format!("expected a nonempty square matrix, got {}×{}", a.nrows(), a.ncols())));
    }
    Ok(())
}

fn check_blocks(block_sizes: &[usize], n: usize, tau: &[u32], j: usize) -> Result<()> {
    if block_sizes.iter().sum::<usize>() != n || block_sizes.iter().any(|&b| b == 0) {
        return Err(Error::Invalid(format!("block sizes {block_sizes:?} do not partition dimension {n}")));
    }
    if tau.len() != block_sizes.len() || j >= block_sizes.len() {
        return Err(Error::Invalid(format!("group index {tau:?} / block {j} do not match {} blocks", block_sizes.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_lex_order() {
        let b = enumerate_basis(2, 2).unwrap();
        assert_eq!(b.indices, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(enumerate_basis(1, 5).unwrap().indices, vec![vec![5]]);
        assert_eq!(enumerate_basis(3, 3).unwrap().len(), 10);
        assert!(matches!(enumerate_basis_capped(10, 10, 1000), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn grouping() {
        assert_eq!(group_map(&[1, 0, 2], &[2, 1]), vec![1, 2]);
        assert_eq!(group_map(&[0, 1, 1, 0], &[1, 2, 1]), vec![0, 2, 0]);
        assert_eq!(group_map(&[3, 1], &[2]), vec![4]);
    }

    #[test]
    fn diagonal_derivation() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 2.0]));
        let t = lift_derivation(&a, 2).unwrap();
        assert_eq!(t, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-2.0, 1.0, 4.0])));
        let l = homological_operator(&a, 2).unwrap();
        let mut eig: Vec<f64> = l.diagonal().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert_eq!(eig, vec![-5.0, -2.0, -2.0, 1.0, 1.0, 4.0]);
    }

    #[test]
    fn scalar_lift_is_power() {
        let a = DMatrix::from_element(1, 1, 1.5);
        assert!((lift_matrix(&a, 3).unwrap()[(0, 0)] - 3.375).abs() < 1e-15);
        let l = homological_operator(&DMatrix::from_element(1, 1, 2.0), 3).unwrap();
        assert_eq!(l[(0, 0)], -4.0);
    }

    #[test]
    fn identity_blocks_of_kronecker() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = kronecker(&DMatrix::identity(2, 2), &b).unwrap();
        assert_eq!(k, crate::linalg::block_diag(&[b.clone(), b]));
    }
}

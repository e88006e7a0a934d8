//! Dense matrix helpers and the vectorization maps used by the regression.
//!
//! Conventions, fixed crate-wide:
//!
//! * `vec` stacks columns, so `vec([[a, b], [c, d]]) = [a, c, b, d]`.
//! * `kron(x, u)` for column vectors is x-major: `[x1*u, x2*u, ..., xn*u]`.
//!   With these two choices `vec(M)ᵀ (x ⊗ u) = uᵀ M x` for `M ∈ R^{m×n}`.
//! * `vecs` and `vech` walk the upper triangle row by row:
//!   `(1,1), (1,2), ..., (1,n), (2,2), ..., (n,n)`. `vech` doubles the
//!   off-diagonal entries so that `vech(F)ᵀ vecs(ξ) = ξᵀ F ξ`.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance on `max|S - Sᵀ|` accepted by [`SymMat::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Number of entries in the upper triangle of an `n × n` matrix.
pub const fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Builds a matrix from row-major data, rejecting empty shapes and
/// non-finite entries.
pub fn mat_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Mat> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("empty {rows}x{cols} matrix")));
    }
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} entries for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    let m = Mat::from_row_slice(rows, cols, data);
    ensure_finite(&m)?;
    Ok(m)
}

/// Builds a matrix from nested rows (the on-disk representation).
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    mat_from_row_major(r, c, &flat)
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn ensure_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("matrix has non-finite entries".into()))
    }
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// A symmetric matrix, stored symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat(Mat);

impl SymMat {
    /// Accepts `s` if it is square, finite and symmetric to within
    /// [`SYMMETRY_TOL`] relative to `max(1, max|S|)`; stores `(S + Sᵀ)/2`.
    pub fn new(s: Mat) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        ensure_finite(&s)?;
        let asym = max_abs(&(&s - s.transpose()));
        let scale = max_abs(&s).max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidValue(format!(
                "matrix is not symmetric (max |S - S^T| = {asym:e})"
            )));
        }
        Ok(Self::symmetrize(s))
    }

    /// Symmetrizes without checking. For results of computations that are
    /// symmetric in exact arithmetic.
    pub fn symmetrize(s: Mat) -> Self {
        let t = s.transpose();
        SymMat((s + t) * 0.5)
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(Mat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(Mat::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMat(Mat::from_diagonal(&Vector::from_row_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }
}

impl Deref for SymMat {
    type Target = Mat;

    fn deref(&self) -> &Mat {
        &self.0
    }
}

impl Serialize for SymMat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        mat_to_rows(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let m = mat_from_rows(&rows).map_err(serde::de::Error::custom)?;
        SymMat::new(m).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter storing a [`Mat`] as nested rows.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        mat_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Kronecker product; block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = Mat::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * r, j * s), (r, s)).copy_from(&(b * aij));
        }
    }
    out
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vector {
    // nalgebra storage is column-major already.
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Upper-triangle monomials `[ξ1², ξ1ξ2, ..., ξ1ξn, ξ2², ..., ξn²]`.
pub fn vecs(xi: &[f64]) -> Vector {
    let mut out = Vector::zeros(tri_len(xi.len()));
    vecs_into(xi, out.as_mut_slice());
    out
}

/// [`vecs`] into a caller-provided buffer of length `n(n+1)/2`.
pub fn vecs_into(xi: &[f64], out: &mut [f64]) {
    let n = xi.len();
    debug_assert_eq!(out.len(), tri_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = xi[i] * xi[j];
            k += 1;
        }
    }
}

/// Upper triangle of a symmetric matrix with doubled off-diagonals.
pub fn vech(f: &SymMat) -> Vector {
    let n = f.dim();
    let mut out = Vector::zeros(tri_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { f[(i, j)] } else { 2.0 * f[(i, j)] };
            k += 1;
        }
    }
    out
}

/// Left inverse of [`vech`].
pub fn unvech(v: &[f64], n: usize) -> Result<SymMat> {
    if n == 0 || v.len() != tri_len(n) {
        return Err(Error::Dimension(format!(
            "vech vector of length {} does not match n = {n}",
            v.len()
        )));
    }
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let val = if i == j { v[k] } else { 0.5 * v[k] };
            m[(i, j)] = val;
            m[(j, i)] = val;
            k += 1;
        }
    }
    Ok(SymMat(m))
}

/// Upper triangle of a symmetric matrix *without* doubling, in `vecs`
/// order. For `S = E[x xᵀ]` this is `E[vecs(x)]`.
pub fn upper_triangle(s: &Mat) -> Vector {
    let n = s.nrows();
    let mut out = Vector::zeros(tri_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = s[(i, j)];
            k += 1;
        }
    }
    out
}

/// `Γ(K)` with `vecs(K x) = Γ(K) (x ⊗ x)` for every `x`.
///
/// Row `(a, b)`, `a ≤ b`, column `p·n + l` holds `K[a,p]·K[b,l]`.
pub fn gamma_of_k(k: &Mat) -> Mat {
    let (m, n) = k.shape();
    let mut g = Mat::zeros(tri_len(m), n * n);
    let mut row = 0;
    for a in 0..m {
        for b in a..m {
            for p in 0..n {
                for l in 0..n {
                    g[(row, p * n + l)] = k[(a, p)] * k[(b, l)];
                }
            }
            row += 1;
        }
    }
    g
}

/// Frobenius norm.
pub fn fro(m: &Mat) -> f64 {
    m.norm()
}

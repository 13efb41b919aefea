//! Small dense real linear algebra.
//!
//! Everything here is row-major `f64` and sized for the matrices that show up
//! in flow layers and Fisher computations (a few hundred rows at most).
//! Symmetric eigenvalues come from a cyclic Jacobi sweep; SPD inversion goes
//! through Cholesky with no pivoted fallback.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number above which SPD inversion logs a warning.
pub const ILL_CONDITIONED: f64 = 1e12;

const SYMMETRY_TOL: f64 = 1e-12;
const PIVOT_FLOOR: f64 = 1e-300;

/// Serialized as a list of rows.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Matrix::from_rows(&refs)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build without the finiteness scan. Used on hot paths whose inputs are
    /// already checked.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("matmul result"));
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let out: Vec<f64> = (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matvec result"));
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        // scaled accumulation so huge entries do not overflow the sum of squares
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        scale * self.data.iter().map(|v| (v / scale).powi(2)).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::ShapeMismatch("trace of a non-square matrix".into()));
        }
        Ok((0..self.rows).map(|i| self[(i, i)]).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Relative asymmetry `max |a_ij - a_ji| / max |a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    fn require_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::ShapeMismatch(format!("{:?} is not square", self.shape())));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("symmetric matrix input"));
        }
        if self.asymmetry() > SYMMETRY_TOL {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric (relative asymmetry {:.3e})",
                self.asymmetry()
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Cholesky factor `L` of an SPD matrix together with `log det`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: Matrix,
    log_det: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solve `A x = b` using the stored factor.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let y = solve_lower(&self.lower, b, false)?;
        solve_lower_transposed(&self.lower, &y)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv.symmetrized())
    }

    pub fn reconstruct(&self) -> Matrix {
        let l = &self.lower;
        l.matmul(&l.transpose()).expect("square factor")
    }
}

pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
    a.require_symmetric()?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= PIVOT_FLOOR || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        log_det += 2.0 * ljj.ln();
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(SpdFactor { lower: l, log_det })
}

/// Forward substitution with a lower-triangular matrix. With `unit` the
/// diagonal is taken as one regardless of the stored values.
pub fn solve_lower(l: &Matrix, b: &[f64], unit: bool) -> Result<Vec<f64>> {
    let n = l.rows;
    if !l.is_square() || b.len() != n {
        return Err(Error::ShapeMismatch("triangular solve".into()));
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = if unit { s } else { s / l[(i, i)] };
    }
    Ok(x)
}

/// Back substitution with an upper-triangular matrix.
pub fn solve_upper(u: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = u.rows;
    if !u.is_square() || b.len() != n {
        return Err(Error::ShapeMismatch("triangular solve".into()));
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= u[(i, k)] * x[k];
        }
        x[i] = s / u[(i, i)];
    }
    Ok(x)
}

fn solve_lower_transposed(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    let factor = cholesky(a)?;
    let inv = factor.inverse()?;
    if !inv.is_finite() {
        return Err(Error::NonFinite("SPD inverse"));
    }
    let cond = condition_number_spd(a)?;
    if cond > ILL_CONDITIONED {
        log::warn!("inverting an ill-conditioned SPD matrix (condition number {cond:.3e})");
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(a)?.0)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending and the
/// matching eigenvectors stored as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    a.require_symmetric()?;
    let n = a.rows;
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let total = m.frobenius_norm();
    if total == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-17 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

pub fn spectral_norm_sym(a: &Matrix) -> Result<f64> {
    let ev = symmetric_eigenvalues(a)?;
    Ok(ev.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `λ_max / λ_min` of an SPD matrix; infinite when `λ_min ≤ 0`.
pub fn condition_number_spd(a: &Matrix) -> Result<f64> {
    let ev = symmetric_eigenvalues(a)?;
    let lo = ev.first().copied().unwrap_or(0.0);
    let hi = ev.last().copied().unwrap_or(0.0);
    if lo <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(hi / lo)
}

/// LU factorization with partial pivoting for general square matrices.
#[derive(Clone, Debug)]
pub struct LuFactor {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl LuFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch("LU of a non-square matrix".into()));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("LU input"));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= PIVOT_FLOOR {
                return Err(Error::RankDeficient(format!("zero pivot in column {k}")));
            }
            if p != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(p, c)];
                    lu[(p, c)] = tmp;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                for c in (k + 1)..n {
                    lu[(i, c)] -= f * lu[(k, c)];
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.lu.rows).map(|i| self.lu[(i, i)].abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.lu.rows).map(|i| self.lu[(i, i)]).product::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(Error::ShapeMismatch("LU solve".into()));
        }
        let pb: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        let y = solve_lower(&self.lu, &pb, true)?;
        solve_upper(&self.lu, &y)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.lu.rows;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let a = random_matrix(n, n, seed);
        a.transpose().matmul(&a).unwrap().add(&Matrix::identity(n)).unwrap().symmetrized()
    }

    #[test]
    fn cholesky_of_identity_and_diagonal() {
        let f = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(f.lower(), &Matrix::identity(3));
        assert_eq!(f.log_det(), 0.0);

        let f = cholesky(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(f.lower(), &Matrix::from_diag(&[2.0, 3.0]));
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_round_trip_random() {
        let a = random_spd(12, 7);
        let f = cholesky(&a).unwrap();
        let resid = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(resid <= 1e-10, "residual {resid}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { index: 1, .. })));
        let zero = Matrix::zeros(2, 2);
        assert!(matches!(cholesky(&zero), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[0.0, 2.0]]).unwrap();
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn inverse_spd_examples() {
        let inv = inverse_spd(&Matrix::from_diag(&[2.0, 4.0])).unwrap();
        assert!(inv.max_abs_diff(&Matrix::from_diag(&[0.5, 0.25])) < 1e-15);
        assert_eq!(inverse_spd(&Matrix::identity(4)).unwrap(), Matrix::identity(4));

        let a = random_spd(10, 3);
        let inv = inverse_spd(&a).unwrap();
        let resid = a.matmul(&inv).unwrap().sub(&Matrix::identity(10)).unwrap().frobenius_norm();
        assert!(resid <= 1e-8, "residual {resid}");
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm_sym(&Matrix::from_diag(&[1.0, -3.0])).unwrap(), 3.0);
        assert_eq!(spectral_norm_sym(&Matrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        for seed in 0..5 {
            let a = random_matrix(9, 9, 100 + seed);
            let s = a.add(&a.transpose()).unwrap().scale(0.5);
            let ours = symmetric_eigenvalues(&s).unwrap();
            let na = nalgebra::DMatrix::from_row_slice(9, 9, s.as_slice());
            let mut theirs: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            theirs.sort_by(f64::total_cmp);
            let scale = theirs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() <= 1e-8 * scale, "{x} vs {y}");
            }
            let norm = spectral_norm_sym(&s).unwrap();
            assert!((norm - scale).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn eigenvectors_diagonalize() {
        let a = random_spd(6, 11);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let back = vecs
            .matmul(&Matrix::from_diag(&vals))
            .unwrap()
            .matmul(&vecs.transpose())
            .unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn small_definitions() {
        assert_eq!(condition_number_spd(&Matrix::from_diag(&[1.0, 4.0])).unwrap(), 4.0);
        assert!((Matrix::identity(2).frobenius_norm() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Matrix::from_diag(&[2.0, 5.0]).trace().unwrap(), 7.0);
        assert!(Matrix::zeros(2, 3).trace().is_err());
        assert!(Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).is_err());
        assert!(Matrix::zeros(2, 3).matvec(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        let a = Matrix::from_diag(&[1e200, 1e200]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn lu_determinant_and_solve() {
        let a = random_matrix(7, 7, 42);
        let lu = LuFactor::new(&a).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(7, 7, a.as_slice());
        assert!((lu.det() - na.determinant()).abs() < 1e-12 * na.determinant().abs().max(1.0));
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let x = lu.solve(&b).unwrap();
        let back = a.matvec(&x).unwrap();
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cholesky_reconstructs_spd(n in 1usize..64, seed in any::<u64>()) {
            let a = random_spd(n, seed);
            let f = cholesky(&a).unwrap();
            let resid = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            prop_assert!(resid <= 1e-10);
        }

        #[test]
        fn spectral_below_frobenius(n in 1usize..16, seed in any::<u64>()) {
            let a = random_matrix(n, n, seed);
            let s = a.add(&a.transpose()).unwrap();
            prop_assert!(spectral_norm_sym(&s).unwrap() <= s.frobenius_norm() * (1.0 + 1e-12));
        }

        #[test]
        fn double_inverse_is_identity(n in 1usize..12, seed in any::<u64>()) {
            let a = random_spd(n, seed);
            prop_assume!(condition_number_spd(&a).unwrap() <= 1e6);
            let back = inverse_spd(&inverse_spd(&a).unwrap()).unwrap();
            let rel = back.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            prop_assert!(rel <= 1e-6);
        }
    }
}

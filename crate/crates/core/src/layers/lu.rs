use rand::Rng;

use crate::diff::tape::lu_compose;
use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::TapeLogDet;

/// Generative map `z' = W z` with `W = P L (U + diag(exp s))`; `P` is the
/// fixed reversal permutation, `L` unit lower and `U` strictly upper
/// triangular. Only the relevant triangles of the stored matrices are read.
#[derive(Clone, Debug, PartialEq)]
pub struct LuLinear {
    pub(crate) lower: Matrix,
    pub(crate) upper: Matrix,
    pub(crate) log_scale: Matrix,
}

impl LuLinear {
    pub fn identity_init(dim: usize) -> Self {
        Self {
            lower: Matrix::zeros(dim, dim),
            upper: Matrix::zeros(dim, dim),
            log_scale: Matrix::zeros(1, dim),
        }
    }

    pub fn from_parts(lower: Matrix, upper: Matrix, log_scale: Vec<f64>) -> Result<Self> {
        let d = log_scale.len();
        if lower.shape() != (d, d) || upper.shape() != (d, d) {
            return Err(Error::ShapeMismatch("LU factors".into()));
        }
        Ok(Self { lower, upper, log_scale: Matrix::new(1, d, log_scale)? })
    }

    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for m in [&mut self.lower, &mut self.upper, &mut self.log_scale] {
            for v in m.as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.log_scale.cols()
    }

    pub fn weight(&self) -> Matrix {
        lu_compose(&self.lower, &self.upper, self.log_scale.as_slice())
    }

    fn log_det(&self) -> f64 {
        self.log_scale.as_slice().iter().sum()
    }

    pub fn forward<T: Real>(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        let d = self.dim();
        // v = (U + diag(exp s)) z, then u = L v, then reverse.
        let mut v = vec![T::zero(); d];
        for r in 0..d {
            let mut acc = z[r] * self.log_scale[(0, r)].exp();
            for c in (r + 1)..d {
                acc += z[c] * self.upper[(r, c)];
            }
            v[r] = acc;
        }
        let mut u = vec![T::zero(); d];
        for r in 0..d {
            let mut acc = v[r];
            for c in 0..r {
                acc += v[c] * self.lower[(r, c)];
            }
            u[r] = acc;
        }
        u.reverse();
        Ok((u, T::cst(self.log_det())))
    }

    pub fn inverse<T: Real>(&self, y: &[T]) -> Result<(Vec<T>, T)> {
        let d = self.dim();
        let mut u: Vec<T> = y.iter().rev().copied().collect();
        for r in 0..d {
            let mut acc = u[r];
            for c in 0..r {
                acc -= u[c] * self.lower[(r, c)];
            }
            u[r] = acc;
        }
        for r in (0..d).rev() {
            let mut acc = u[r];
            for c in (r + 1)..d {
                acc -= u[c] * self.upper[(r, c)];
            }
            u[r] = acc * (-self.log_scale[(0, r)]).exp();
        }
        Ok((u, T::cst(-self.log_det())))
    }

    pub fn tape_inverse(&self, tape: &mut GradTape, y: Var, params: &[Var]) -> Result<(Var, TapeLogDet)> {
        let w = tape.lu_compose(params[0], params[1], params[2]);
        let wi = tape.inverse(w)?;
        let x = tape.matmul_t(y, wi);
        let ld = tape.sum_all(params[2]);
        let ld = tape.neg(ld);
        Ok((x, TapeLogDet::Scalar(ld)))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.lower, &self.upper, &self.log_scale]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_scale]
    }
}

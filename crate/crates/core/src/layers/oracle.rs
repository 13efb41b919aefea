//! Fixed analytic layers used to assemble the optimal generators.

use crate::diff::{checked_ln, checked_sqrt, Real};
use crate::error::{Error, Result};
use crate::linalg::{LuFactor, Matrix};
use crate::oracles::edge::{edge_image, EdgeSpec};

use super::LayerCache;

/// θ-dependent signal added by [`AdditiveShift`].
#[derive(Clone, Debug, PartialEq)]
pub enum Signal {
    /// `h = A θ`.
    Linear(Matrix),
    /// `h = f(θ)`, the clean edge image.
    Edge(EdgeSpec),
}

impl Signal {
    pub fn eval<T: Real>(&self, theta: &[T]) -> Result<Vec<T>> {
        match self {
            Signal::Linear(a) => {
                if a.cols() != theta.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "signal matrix has {} columns, θ has {}",
                        a.cols(),
                        theta.len()
                    )));
                }
                Ok((0..a.rows())
                    .map(|r| {
                        a.row(r).iter().zip(theta).fold(T::zero(), |acc, (&w, &t)| acc + t * w)
                    })
                    .collect())
            }
            Signal::Edge(spec) => edge_image(spec, theta),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Signal::Linear(a) => a.rows(),
            Signal::Edge(spec) => spec.dim(),
        }
    }
}

/// `z' = z + h(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveShift {
    pub(crate) signal: Signal,
}

impl AdditiveShift {
    pub fn new(signal: Signal) -> Self {
        Self { signal }
    }

    pub fn prepare<T: Real>(&self, theta: &[T]) -> Result<LayerCache<T>> {
        Ok(LayerCache::Shift(self.signal.eval(theta)?))
    }

    fn shift<'a, T: Real>(&self, v: &[T], cache: &'a LayerCache<T>) -> Result<&'a [T]> {
        let LayerCache::Shift(h) = cache else {
            return Err(Error::InvalidArgument("shift layer needs its θ cache".into()));
        };
        if h.len() != v.len() {
            return Err(Error::ShapeMismatch(format!("shift of length {} on {}", h.len(), v.len())));
        }
        Ok(h)
    }

    pub fn forward<T: Real>(&self, z: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let h = self.shift(z, cache)?;
        Ok((z.iter().zip(h).map(|(&a, &b)| a + b).collect(), T::zero()))
    }

    pub fn inverse<T: Real>(&self, y: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let h = self.shift(y, cache)?;
        Ok((y.iter().zip(h).map(|(&a, &b)| a - b).collect(), T::zero()))
    }
}

/// `z' = L z` for a fixed invertible `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear {
    pub(crate) l: Matrix,
    l_inv: Matrix,
    log_abs_det: f64,
}

impl DenseLinear {
    pub fn new(l: Matrix) -> Result<Self> {
        let lu = LuFactor::new(&l).map_err(|_| Error::SingularL)?;
        let log_abs_det = lu.log_abs_det();
        if !log_abs_det.is_finite() {
            return Err(Error::SingularL);
        }
        Ok(Self { l_inv: lu.inverse()?, l, log_abs_det })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.l
    }

    pub fn inverse_matrix(&self) -> &Matrix {
        &self.l_inv
    }

    fn apply<T: Real>(m: &Matrix, v: &[T]) -> Vec<T> {
        (0..m.rows())
            .map(|r| m.row(r).iter().zip(v).fold(T::zero(), |acc, (&w, &x)| acc + x * w))
            .collect()
    }

    pub fn forward<T: Real>(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        Ok((Self::apply(&self.l, z), T::cst(self.log_abs_det)))
    }

    pub fn inverse<T: Real>(&self, y: &[T]) -> Result<(Vec<T>, T)> {
        Ok((Self::apply(&self.l_inv, y), T::cst(-self.log_abs_det)))
    }
}

/// Signal-dependent Gaussian noise: `z' = f(θ) + √(α² f(θ) + δ²) ⊙ z`.
#[derive(Clone, Debug, PartialEq)]
pub struct NlfNoise {
    pub(crate) spec: EdgeSpec,
    pub(crate) alpha: f64,
    pub(crate) delta: f64,
}

impl NlfNoise {
    pub fn new(spec: EdgeSpec, alpha: f64, delta: f64) -> Self {
        Self { spec, alpha, delta }
    }

    pub fn prepare<T: Real>(&self, theta: &[T]) -> Result<LayerCache<T>> {
        let f = edge_image(&self.spec, theta)?;
        let a2 = self.alpha * self.alpha;
        let d2 = self.delta * self.delta;
        let mut scale = Vec::with_capacity(f.len());
        let mut log_det = T::zero();
        for &v in &f {
            let var = v * a2 + d2;
            if !(var.re() > 0.0) {
                return Err(Error::DegenerateNoise(format!("variance {}", var.re())));
            }
            let sd = checked_sqrt(var)?;
            log_det += checked_ln(sd)?;
            scale.push(sd);
        }
        Ok(LayerCache::Diag { scale, shift: f, log_det })
    }

    pub fn forward<T: Real>(&self, z: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let LayerCache::Diag { scale, shift, log_det } = cache else {
            return Err(Error::InvalidArgument("noise layer needs its θ cache".into()));
        };
        let out = z.iter().zip(scale.iter().zip(shift)).map(|(&v, (&s, &b))| v * s + b).collect();
        Ok((out, *log_det))
    }

    pub fn inverse<T: Real>(&self, y: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let LayerCache::Diag { scale, shift, log_det } = cache else {
            return Err(Error::InvalidArgument("noise layer needs its θ cache".into()));
        };
        let out = y.iter().zip(scale.iter().zip(shift)).map(|(&v, (&s, &b))| (v - b) / s).collect();
        Ok((out, -*log_det))
    }
}

/// Elementwise `γ = θ · cbrt(σ z)` with a scalar θ.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeRoot {
    pub(crate) sigma: f64,
}

impl CubeRoot {
    pub fn new(sigma: f64) -> Self {
        Self { sigma }
    }

    fn theta<T: Real>(theta: &[T]) -> Result<T> {
        match theta {
            [t] if t.re() > 0.0 => Ok(*t),
            [t] => Err(Error::NonPositiveTheta(t.re())),
            _ => Err(Error::ShapeMismatch("scale generator takes a scalar θ".into())),
        }
    }

    pub fn forward<T: Real>(&self, z: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let t = Self::theta(theta)?;
        let mut out = Vec::with_capacity(z.len());
        let mut log_det = T::zero();
        for &v in z {
            let c = (v * self.sigma).cbrt();
            let g = t * c;
            // dγ/dz = θ σ / (3 cbrt(σz)²)
            log_det += checked_ln(t * self.sigma / (c * c * 3.0))?;
            out.push(g);
        }
        Ok((out, log_det))
    }

    pub fn inverse<T: Real>(&self, y: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let t = Self::theta(theta)?;
        let mut out = Vec::with_capacity(y.len());
        let mut log_det = T::zero();
        for &g in y {
            let r = g / t;
            out.push(r * r * r / self.sigma);
            // dz/dγ = 3 γ² / (θ³ σ)
            log_det += checked_ln(r * r * 3.0 / (t * self.sigma))?;
        }
        Ok((out, log_det))
    }
}

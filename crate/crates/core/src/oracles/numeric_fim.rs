//! Brute-force Fisher information, independent of the flow machinery.

use crate::diff::{fd_jacobian, FD_STEP};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, Matrix};
use crate::rng::{stream, GaussianStream, StreamRng};

use super::channel::ChannelSpec;
use super::quadrature::Rule;

/// A parametric density that can be evaluated, differentiated and sampled.
pub trait StatModel {
    fn dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn log_density(&self, r: &[f64], theta: &[f64]) -> Result<f64>;

    fn score(&self, r: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        fd_score(|th| self.log_density(r, th), theta)
    }

    /// Center and per-coordinate half-width of a box holding the mass.
    fn window(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)>;

    fn sample(&self, theta: &[f64], g: &mut GaussianStream<StreamRng>) -> Result<Vec<f64>>;

    fn gaussian_moments(&self, _theta: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        Err(Error::UnsupportedSpec("model is not Gaussian".into()))
    }
}

/// Central-difference gradient that propagates evaluation errors.
pub fn fd_score(mut f: impl FnMut(&[f64]) -> Result<f64>, theta: &[f64]) -> Result<Vec<f64>> {
    let mut err = None;
    let g = crate::diff::fd_gradient(
        |th| {
            f(th).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        },
        theta,
        FD_STEP,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(g),
    }
}

impl StatModel for ChannelSpec {
    fn dim(&self) -> usize {
        ChannelSpec::dim(self)
    }
    fn theta_dim(&self) -> usize {
        ChannelSpec::theta_dim(self)
    }
    fn log_density(&self, r: &[f64], theta: &[f64]) -> Result<f64> {
        ChannelSpec::log_density(self, r, theta)
    }
    fn score(&self, r: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        ChannelSpec::score(self, r, theta)
    }
    fn window(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        let center = match self {
            ChannelSpec::Scale { .. } => vec![0.0; self.dim()],
            _ => self.gaussian_moments(theta)?.0,
        };
        Ok((center, self.support_radius(theta)))
    }
    fn sample(&self, theta: &[f64], g: &mut GaussianStream<StreamRng>) -> Result<Vec<f64>> {
        ChannelSpec::sample(self, theta, g)
    }
    fn gaussian_moments(&self, theta: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        ChannelSpec::gaussian_moments(self, theta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FimMethod {
    /// Tensor-product Gauss–Legendre over the model window, `d ≤ 2`.
    Quadrature { panels: usize },
    MonteCarlo { m: usize, seed: u64 },
    /// `∂μᵀ C⁻¹ ∂μ + ½ tr(C⁻¹ ∂C C⁻¹ ∂C)` with differenced moments.
    GaussianAnalytic,
}

impl FimMethod {
    pub const QUADRATURE: FimMethod = FimMethod::Quadrature { panels: 400 };
}

const QUAD_ORDER: usize = 10;

pub fn numeric_fim(model: &dyn StatModel, theta: &[f64], method: FimMethod) -> Result<Matrix> {
    if theta.len() != model.theta_dim() {
        return Err(Error::ShapeMismatch("θ dimension".into()));
    }
    let fim = match method {
        FimMethod::Quadrature { panels } => quadrature_fim(model, theta, panels)?,
        FimMethod::MonteCarlo { m, seed } => monte_carlo_fim(model, theta, m, seed)?,
        FimMethod::GaussianAnalytic => gaussian_fim(model, theta)?,
    };
    Ok(fim.symmetrized())
}

fn add_outer(acc: &mut Matrix, s: &[f64], w: f64) {
    let k = s.len();
    for i in 0..k {
        for j in 0..k {
            acc[(i, j)] += w * s[i] * s[j];
        }
    }
}

fn quadrature_fim(model: &dyn StatModel, theta: &[f64], panels: usize) -> Result<Matrix> {
    let d = model.dim();
    if d > 2 {
        return Err(Error::UnsupportedDimension { found: d, reason: "quadrature oracle needs d <= 2" });
    }
    let (center, half) = model.window(theta)?;
    if !half.is_finite() {
        return Err(Error::QuadratureFailure("model has no finite window".into()));
    }
    let rules = center
        .iter()
        .map(|c| Rule::composite(c - half, c + half, panels, QUAD_ORDER))
        .collect::<Result<Vec<_>>>()?;
    let k = model.theta_dim();
    let mut acc = Matrix::zeros(k, k);
    let mut mass = 0.0;
    let mut visit = |r: &[f64], w: f64| -> Result<()> {
        let lp = model.log_density(r, theta)?;
        let p = lp.exp();
        if p == 0.0 {
            return Ok(());
        }
        let s = model.score(r, theta)?;
        add_outer(&mut acc, &s, w * p);
        mass += w * p;
        Ok(())
    };
    if d == 1 {
        for (x, w) in rules[0].nodes.iter().zip(&rules[0].weights) {
            visit(&[*x], *w)?;
        }
    } else {
        for (x, wx) in rules[0].nodes.iter().zip(&rules[0].weights) {
            for (y, wy) in rules[1].nodes.iter().zip(&rules[1].weights) {
                visit(&[*x, *y], wx * wy)?;
            }
        }
    }
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::QuadratureFailure(format!("window holds mass {mass}")));
    }
    if !acc.is_finite() {
        return Err(Error::QuadratureFailure("non-finite Fisher integrand".into()));
    }
    Ok(acc)
}

fn monte_carlo_fim(model: &dyn StatModel, theta: &[f64], m: usize, seed: u64) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    let mut g = GaussianStream::seeded(seed, stream::CHANNEL);
    let k = model.theta_dim();
    let mut acc = Matrix::zeros(k, k);
    for _ in 0..m {
        let r = model.sample(theta, &mut g)?;
        add_outer(&mut acc, &model.score(&r, theta)?, 1.0);
    }
    Ok(acc.scale(1.0 / m as f64))
}

fn gaussian_fim(model: &dyn StatModel, theta: &[f64]) -> Result<Matrix> {
    let (mu, c) = model.gaussian_moments(theta)?;
    let n = mu.len();
    let k = theta.len();
    let mut err = None;
    let dmu = fd_jacobian(
        |th| match model.gaussian_moments(th) {
            Ok((m, _)) => m,
            Err(e) => {
                err.get_or_insert(e);
                vec![f64::NAN; n]
            }
        },
        theta,
        FD_STEP,
    );
    let dc_flat = fd_jacobian(
        |th| match model.gaussian_moments(th) {
            Ok((_, c)) => c.into_vec(),
            Err(e) => {
                err.get_or_insert(e);
                vec![f64::NAN; n * n]
            }
        },
        theta,
        FD_STEP,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let fac = cholesky(&c)?;
    let cinv = fac.inverse()?;
    let col = |m: &Matrix, j: usize| (0..m.rows()).map(|i| m[(i, j)]).collect::<Vec<_>>();
    let w: Vec<Vec<f64>> = (0..k).map(|j| fac.solve(&col(&dmu, j))).collect::<Result<_>>()?;
    // C⁻¹ ∂_j C
    let q: Vec<Matrix> = (0..k)
        .map(|j| Matrix::new(n, n, col(&dc_flat, j)).and_then(|dc| cinv.matmul(&dc)))
        .collect::<Result<_>>()?;
    let mut fim = Matrix::zeros(k, k);
    for i in 0..k {
        let dmu_i = col(&dmu, i);
        for j in 0..k {
            let mean_term: f64 = dmu_i.iter().zip(&w[j]).map(|(a, b)| a * b).sum();
            fim[(i, j)] = mean_term + 0.5 * q[i].matmul(&q[j])?.trace()?;
        }
    }
    Ok(fim)
}

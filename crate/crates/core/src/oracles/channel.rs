//! Measurement channels with closed-form densities and bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::linalg::{cholesky, inverse_spd, Matrix};
use crate::rng::{stream, GaussianStream, StreamRng};

use super::edge::{edge_image, edge_nlf_crb_matrix, edge_wgn_crb_matrix, EdgeSpec};

const LOG_2PI: f64 = crate::flow::LOG_2PI;

/// Axis-aligned parameter box `Θ = [lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(k: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; k], hi: vec![hi; k] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::ShapeMismatch("parameter box bounds".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("parameter box needs finite lo <= hi".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(self.lo.iter().zip(&self.hi)).all(|(t, (l, h))| l <= t && t <= h)
    }

    /// Independent uniform draw per coordinate.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..=h) })
            .collect()
    }
}

/// Analytic channel descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// `r = Aθ + v`, `v ~ N(0, C)`, `C = L Lᵀ`.
    LinearGaussian { a: Matrix, c_vv: Matrix, l: Matrix, theta_box: ThetaBox },
    /// `r_j = θ y_j`, `y_j = cbrt(w_j)`, `w_j ~ N(0, σ²)` i.i.d. over `stack` copies.
    Scale { sigma: f64, stack: usize, theta_box: ThetaBox },
    /// Edge image in white Gaussian noise.
    EdgeWgn { edge: EdgeSpec, sigma: f64, theta_box: ThetaBox },
    /// Edge image in noise of variance `α² f + δ²`.
    EdgeNlf { edge: EdgeSpec, alpha: f64, delta: f64, theta_box: ThetaBox },
}

/// Analytic Cramér–Rao bound at one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct CrbResult {
    pub bound: Matrix,
    pub channel: &'static str,
    pub theta: Vec<f64>,
}

impl ChannelSpec {
    /// `d × k` standard-normal `A`, `L = σ_v G` with `G` standard normal.
    pub fn linear_seeded(d: usize, k: usize, sigma_v: f64, seed: u64) -> Result<Self> {
        let mut g = GaussianStream::seeded(seed, stream::CHANNEL);
        let a = g.matrix(d, k);
        let l = g.matrix(d, d).scale(sigma_v);
        Self::linear(a, l, ThetaBox::cube(k, -2.0, 2.0))
    }

    pub fn linear(a: Matrix, l: Matrix, theta_box: ThetaBox) -> Result<Self> {
        if l.rows() != a.rows() || !l.is_square() || theta_box.dim() != a.cols() {
            return Err(Error::ShapeMismatch("linear channel A, L and Θ".into()));
        }
        let c_vv = l.matmul(&l.transpose())?.symmetrized();
        Ok(ChannelSpec::LinearGaussian { a, c_vv, l, theta_box })
    }

    pub fn scale(sigma: f64, stack: usize) -> Self {
        ChannelSpec::Scale { sigma, stack, theta_box: ThetaBox::cube(1, 3.0, 6.0) }
    }

    fn edge_box(edge: &EdgeSpec) -> ThetaBox {
        ThetaBox { lo: vec![0.0, 0.5], hi: vec![(edge.h - 1) as f64, 8.0] }
    }

    pub fn edge_wgn(edge: EdgeSpec, sigma: f64) -> Self {
        let theta_box = Self::edge_box(&edge);
        ChannelSpec::EdgeWgn { edge, sigma, theta_box }
    }

    pub fn edge_nlf(edge: EdgeSpec, alpha: f64, delta: f64) -> Self {
        let theta_box = Self::edge_box(&edge);
        ChannelSpec::EdgeNlf { edge, alpha, delta, theta_box }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ChannelSpec::LinearGaussian { .. } => "linear_gaussian",
            ChannelSpec::Scale { .. } => "scale",
            ChannelSpec::EdgeWgn { .. } => "edge_wgn",
            ChannelSpec::EdgeNlf { .. } => "edge_nlf",
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta_box().validate()?;
        if self.theta_box().dim() != self.theta_dim() {
            return Err(Error::ShapeMismatch("parameter box dimension".into()));
        }
        match self {
            ChannelSpec::LinearGaussian { a, c_vv, l, .. } => {
                if c_vv.shape() != (a.rows(), a.rows()) || l.shape() != c_vv.shape() {
                    return Err(Error::ShapeMismatch("linear channel matrices".into()));
                }
                cholesky(c_vv)?;
            }
            ChannelSpec::Scale { sigma, stack, theta_box } => {
                if !(*sigma > 0.0) || *stack == 0 {
                    return Err(Error::InvalidArgument("scale channel needs σ > 0 and stack >= 1".into()));
                }
                if !(theta_box.lo[0] > 0.0) {
                    return Err(Error::NonPositiveTheta(theta_box.lo[0]));
                }
            }
            ChannelSpec::EdgeWgn { edge, sigma, theta_box } => {
                edge.validate()?;
                if !(*sigma > 0.0) {
                    return Err(Error::DegenerateNoise(format!("σ = {sigma}")));
                }
                Self::check_edge_box(edge, theta_box)?;
            }
            ChannelSpec::EdgeNlf { edge, delta, alpha, theta_box } => {
                edge.validate()?;
                if *delta == 0.0 && *alpha == 0.0 {
                    return Err(Error::DegenerateNoise("α = δ = 0".into()));
                }
                Self::check_edge_box(edge, theta_box)?;
            }
        }
        Ok(())
    }

    fn check_edge_box(edge: &EdgeSpec, b: &ThetaBox) -> Result<()> {
        if !(b.lo[1] > 0.0) {
            return Err(Error::DomainError("edge width must stay positive over Θ".into()));
        }
        if b.lo[0] < 0.0 || b.hi[0] > (edge.h - 1) as f64 {
            return Err(Error::DomainError("edge position must stay inside the image".into()));
        }
        Ok(())
    }

    pub fn theta_box(&self) -> &ThetaBox {
        match self {
            ChannelSpec::LinearGaussian { theta_box, .. }
            | ChannelSpec::Scale { theta_box, .. }
            | ChannelSpec::EdgeWgn { theta_box, .. }
            | ChannelSpec::EdgeNlf { theta_box, .. } => theta_box,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ChannelSpec::LinearGaussian { a, .. } => a.rows(),
            ChannelSpec::Scale { stack, .. } => *stack,
            ChannelSpec::EdgeWgn { edge, .. } | ChannelSpec::EdgeNlf { edge, .. } => edge.dim(),
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            ChannelSpec::LinearGaussian { a, .. } => a.cols(),
            ChannelSpec::Scale { .. } => 1,
            ChannelSpec::EdgeWgn { .. } | ChannelSpec::EdgeNlf { .. } => 2,
        }
    }

    /// One measurement at `θ`.
    pub fn sample(&self, theta: &[f64], g: &mut GaussianStream<StreamRng>) -> Result<Vec<f64>> {
        if theta.len() != self.theta_dim() {
            return Err(Error::ShapeMismatch("θ dimension".into()));
        }
        Ok(match self {
            ChannelSpec::LinearGaussian { a, l, .. } => {
                let v = l.matvec(&g.vector(l.cols()))?;
                a.matvec(theta)?.iter().zip(&v).map(|(m, n)| m + n).collect()
            }
            ChannelSpec::Scale { sigma, stack, .. } => {
                (0..*stack).map(|_| theta[0] * (sigma * g.next()).cbrt()).collect()
            }
            ChannelSpec::EdgeWgn { edge, sigma, .. } => {
                edge_image::<f64>(edge, theta)?.into_iter().map(|f| f + sigma * g.next()).collect()
            }
            ChannelSpec::EdgeNlf { edge, alpha, delta, .. } => edge_image::<f64>(edge, theta)?
                .into_iter()
                .map(|f| f + (alpha * alpha * f + delta * delta).sqrt() * g.next())
                .collect(),
        })
    }

    /// Mean and covariance of Gaussian channels.
    pub fn gaussian_moments(&self, theta: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        match self {
            ChannelSpec::LinearGaussian { a, c_vv, .. } => Ok((a.matvec(theta)?, c_vv.clone())),
            ChannelSpec::EdgeWgn { edge, sigma, .. } => {
                let f = edge_image::<f64>(edge, theta)?;
                let n = f.len();
                Ok((f, Matrix::from_diag(&vec![sigma * sigma; n])))
            }
            ChannelSpec::EdgeNlf { edge, alpha, delta, .. } => {
                let f = edge_image::<f64>(edge, theta)?;
                let var: Vec<f64> = f.iter().map(|v| alpha * alpha * v + delta * delta).collect();
                Ok((f, Matrix::from_diag(&var)))
            }
            ChannelSpec::Scale { .. } => Err(Error::UnsupportedSpec("the scale channel is not Gaussian".into())),
        }
    }

    /// True log density `log p_R(r; θ)`.
    pub fn log_density(&self, r: &[f64], theta: &[f64]) -> Result<f64> {
        if r.len() != self.dim() || theta.len() != self.theta_dim() {
            return Err(Error::ShapeMismatch("density arguments".into()));
        }
        match self {
            ChannelSpec::Scale { sigma, .. } => {
                let mut acc = 0.0;
                for &x in r {
                    acc += scale_log_pdf(x, theta[0], *sigma)?;
                }
                Ok(acc)
            }
            ChannelSpec::LinearGaussian { a, c_vv, .. } => {
                let f = cholesky(c_vv)?;
                let mu = a.matvec(theta)?;
                let diff: Vec<f64> = r.iter().zip(&mu).map(|(x, m)| x - m).collect();
                let w = crate::linalg::solve_lower(f.lower(), &diff, false)?;
                let q: f64 = w.iter().map(|v| v * v).sum();
                Ok(-0.5 * (q + f.log_det() + r.len() as f64 * LOG_2PI))
            }
            _ => {
                let (mu, c) = self.gaussian_moments(theta)?;
                let mut acc = -0.5 * r.len() as f64 * LOG_2PI;
                for (i, (x, m)) in r.iter().zip(&mu).enumerate() {
                    let v = c[(i, i)];
                    acc -= 0.5 * ((x - m).powi(2) / v + v.ln());
                }
                Ok(acc)
            }
        }
    }

    /// True score `∇_θ log p_R(r; θ)`; closed form where simple, otherwise
    /// central differences.
    pub fn score(&self, r: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            ChannelSpec::Scale { sigma, .. } => {
                let t = theta[0];
                if !(t > 0.0) {
                    return Err(Error::NonPositiveTheta(t));
                }
                let s: f64 = r.iter().map(|x| 3.0 * ((x / t).powi(6) / (sigma * sigma) - 1.0) / t).sum();
                Ok(vec![s])
            }
            _ => {
                let mut err = None;
                let g = crate::diff::fd_gradient(
                    |th| match self.log_density(r, th) {
                        Ok(v) => v,
                        Err(e) => {
                            err = Some(e);
                            f64::NAN
                        }
                    },
                    theta,
                    crate::diff::FD_STEP,
                );
                match err {
                    Some(e) => Err(e),
                    None => Ok(g),
                }
            }
        }
    }

    /// Analytic CRB at `θ`.
    pub fn crb(&self, theta: &[f64]) -> Result<CrbResult> {
        let bound = match self {
            ChannelSpec::LinearGaussian { a, c_vv, .. } => linear_crb(a, c_vv)?.bound,
            ChannelSpec::Scale { stack, .. } => scale_crb(theta[0], *stack)?.bound,
            ChannelSpec::EdgeWgn { edge, sigma, .. } => edge_wgn_crb_matrix(edge, *sigma, theta)?,
            ChannelSpec::EdgeNlf { edge, alpha, delta, .. } => edge_nlf_crb_matrix(edge, *alpha, *delta, theta)?,
        };
        Ok(CrbResult { bound, channel: self.name(), theta: theta.to_vec() })
    }

    /// The exact generator of this channel as a flow.
    pub fn optimal_flow(&self) -> Result<ConditionalFlow> {
        match self {
            ChannelSpec::LinearGaussian { a, l, .. } => linear_optimal_flow(a.clone(), l.clone()),
            ChannelSpec::Scale { sigma, stack, .. } => scale_optimal_flow(*sigma, *stack),
            ChannelSpec::EdgeWgn { edge, sigma, .. } => nlf_diag_gaussian_flow(edge.clone(), 0.0, *sigma),
            ChannelSpec::EdgeNlf { edge, alpha, delta, .. } => nlf_diag_gaussian_flow(edge.clone(), *alpha, *delta),
        }
    }

    /// Half-width of a window around the mean holding all but a negligible
    /// sliver of the density, per coordinate.
    pub fn support_radius(&self, theta: &[f64]) -> f64 {
        match self {
            // (r/θ)⁶ / 2σ² = 40 puts the tail below e⁻⁴⁰
            ChannelSpec::Scale { sigma, .. } => theta[0] * (80.0 * sigma * sigma).powf(1.0 / 6.0),
            _ => match self.gaussian_moments(theta) {
                Ok((_, c)) => 9.0 * c.diag().iter().fold(0.0f64, |m, v| m.max(v.sqrt())),
                Err(_) => f64::INFINITY,
            },
        }
    }
}

/// `(Aᵀ C⁻¹ A)⁻¹`.
pub fn linear_crb(a: &Matrix, c_vv: &Matrix) -> Result<CrbResult> {
    if c_vv.shape() != (a.rows(), a.rows()) {
        return Err(Error::ShapeMismatch("A and C_vv".into()));
    }
    let f = cholesky(c_vv)?;
    // W = L_f⁻¹ A, then F = Wᵀ W
    let k = a.cols();
    let mut w = Matrix::zeros(a.rows(), k);
    for j in 0..k {
        let col: Vec<f64> = (0..a.rows()).map(|i| a[(i, j)]).collect();
        let s = crate::linalg::solve_lower(f.lower(), &col, false)?;
        for i in 0..a.rows() {
            w[(i, j)] = s[i];
        }
    }
    let fim = w.transpose().matmul(&w)?.symmetrized();
    let eig = crate::linalg::symmetric_eigenvalues(&fim)?;
    let max = eig.last().copied().unwrap_or(0.0);
    if !(eig[0] > 1e-12 * max) {
        return Err(Error::RankDeficient("AᵀC⁻¹A is singular; A lacks full column rank".into()));
    }
    let bound = inverse_spd(&fim).map_err(|e| Error::RankDeficient(e.to_string()))?;
    Ok(CrbResult { bound, channel: "linear_gaussian", theta: Vec::new() })
}

pub fn linear_optimal_flow(a: Matrix, l: Matrix) -> Result<ConditionalFlow> {
    ConditionalFlow::linear_oracle(a, l)
}

/// `θ² / (18 · stack)`.
pub fn scale_crb(theta: f64, stack: usize) -> Result<CrbResult> {
    if !(theta > 0.0) {
        return Err(Error::NonPositiveTheta(theta));
    }
    if stack == 0 {
        return Err(Error::InvalidArgument("stack must be at least 1".into()));
    }
    Ok(CrbResult {
        bound: Matrix::from_diag(&[theta * theta / (18.0 * stack as f64)]),
        channel: "scale",
        theta: vec![theta],
    })
}

pub fn scale_optimal_flow(sigma: f64, stack: usize) -> Result<ConditionalFlow> {
    ConditionalFlow::scale_oracle(sigma, stack)
}

pub fn nlf_diag_gaussian_flow(spec: EdgeSpec, alpha: f64, delta: f64) -> Result<ConditionalFlow> {
    ConditionalFlow::nlf_oracle(spec, alpha, delta)
}

/// `p_R(r) = (2πσ²)^{-1/2} · 3r²/θ³ · exp(−(r/θ)⁶ / 2σ²)`.
pub fn scale_pdf(r: f64, theta: f64, sigma: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    scale_log_pdf(r, theta, sigma).map_or(0.0, f64::exp)
}

fn scale_log_pdf(r: f64, theta: f64, sigma: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::NonPositiveTheta(theta));
    }
    let u = r / theta;
    Ok(-0.5 * (LOG_2PI + (sigma * sigma).ln()) + (3.0 * r * r / theta.powi(3)).ln()
        - u.powi(6) / (2.0 * sigma * sigma))
}

/// `y = cbrt(w)`, `w ~ N(0, σ²)`.
pub fn sample_scale_y(sigma: f64, g: &mut GaussianStream<StreamRng>) -> f64 {
    (sigma * g.next()).cbrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_linear_bounds() {
        let b = linear_crb(&Matrix::identity(2), &Matrix::identity(2).scale(4.0)).unwrap();
        assert!(b.bound.max_abs_diff(&Matrix::identity(2).scale(4.0)) < 1e-14);
        let a = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert!((linear_crb(&a, &Matrix::identity(2)).unwrap().bound[(0, 0)] - 0.5).abs() < 1e-15);
        let rank1 = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert!(matches!(linear_crb(&rank1, &Matrix::identity(2)), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn scale_bounds() {
        for (t, s, v) in [(3.0, 1, 0.5), (6.0, 1, 2.0), (3.0, 2, 0.25)] {
            assert!((scale_crb(t, s).unwrap().bound[(0, 0)] - v).abs() < 1e-15);
        }
        assert!(matches!(scale_crb(0.0, 1), Err(Error::NonPositiveTheta(_))));
        assert_eq!(scale_pdf(0.0, 3.0, 1.0), 0.0);
    }

    #[test]
    fn scale_y_sixth_moment() {
        let mut g = GaussianStream::seeded(21, 0);
        let n = 100_000;
        let sigma = 1.3;
        let m6 = (0..n).map(|_| sample_scale_y(sigma, &mut g).powi(6)).sum::<f64>() / n as f64;
        assert!((m6 - sigma * sigma).abs() <= 0.03 * sigma * sigma);
    }

    #[test]
    fn zero_noise_linear_sample_is_the_mean() {
        let a = Matrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap();
        let spec = ChannelSpec::linear(a.clone(), Matrix::zeros(2, 2), ThetaBox::cube(2, -2.0, 2.0)).unwrap();
        let mut g = GaussianStream::seeded(1, 0);
        let r = spec.sample(&[0.3, 0.7], &mut g).unwrap();
        assert_eq!(r, a.matvec(&[0.3, 0.7]).unwrap());
    }

    #[test]
    fn serde_round_trip() {
        let spec = ChannelSpec::linear_seeded(3, 2, 2.0, 4).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ChannelSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn linear_density_matches_diagonal_formula() {
        let l = Matrix::from_diag(&[2.0, 0.5]);
        let spec = ChannelSpec::linear(Matrix::identity(2), l, ThetaBox::cube(2, -1.0, 1.0)).unwrap();
        let lp = spec.log_density(&[1.0, 0.0], &[0.0, 0.5]).unwrap();
        let direct = -LOG_2PI - (2.0f64 * 0.5).ln() - 0.5 * (0.25 + 1.0);
        assert!((lp - direct).abs() < 1e-14);
    }
}

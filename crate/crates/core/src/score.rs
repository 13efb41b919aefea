//! Score vectors, empirical generative Fisher information and its inverse.
//!
//! The hybrid score holds `γ = G(z; θ)` fixed and differentiates
//! `log p_Z(G⁻¹(γ; θ)) + log|det J_{G⁻¹}(γ; θ)|` in θ with forward-mode
//! duals, one tangent slot per parameter.

use serde::{Deserialize, Serialize};

use crate::diff::{Dual, Real};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, FlowCache, FlowKind};
use crate::linalg::{condition_number_spd, inverse_spd, spectral_norm_sym, symmetric_eigenvalues, LuFactor, Matrix};
use crate::oracles::edge::{edge_profile, EdgeSpec};
use crate::rng::{stream, GaussianStream, StreamRng};

/// Largest parameter dimension the score engine is compiled for.
pub const MAX_THETA_DIM: usize = 4;
pub const DEFAULT_M: usize = 64_000;
/// Draws between retention checks, and the minimum retained fraction.
pub const RETENTION_WINDOW: usize = 1_000_000;
pub const MIN_RETENTION: f64 = 0.01;
/// Latents this close to zero are redrawn for the cube-root generator.
pub const CUBE_ROOT_EXCLUSION: f64 = 1e-12;
const DEGENERATE_RATIO: f64 = 1e-12;

/// Ball `‖γ − center‖₂ ≤ radius` of trusted measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustedRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl TrustedRegion {
    /// Sample mean and maximum distance of the rows of `data`.
    pub fn fit(data: &Matrix) -> Result<Self> {
        let n = data.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = data.cols();
        let mut center = vec![0.0; d];
        for r in 0..n {
            for (c, v) in center.iter_mut().zip(data.row(r)) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let radius = (0..n).map(|r| dist2(data.row(r), &center)).fold(0.0f64, f64::max).sqrt();
        Ok(Self { center, radius })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self { center: vec![0.0; dim], radius: f64::INFINITY }
    }

    pub fn contains(&self, gamma: &[f64]) -> bool {
        dist2(gamma, &self.center) <= self.radius * self.radius
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One generated latent, its measurement and (when trusted) its score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSample {
    pub z: Vec<f64>,
    pub gamma: Vec<f64>,
    pub score: Option<Vec<f64>>,
}

impl ScoreSample {
    pub fn trusted(&self) -> bool {
        self.score.is_some()
    }
}

/// Empirical Fisher matrix with its sampling record.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    pub matrix: Matrix,
    pub m: usize,
    pub generated: usize,
    pub retained: usize,
    /// Latents redrawn because the generator is singular there.
    pub redrawn: usize,
    /// Mean of the retained scores.
    pub score_mean: Vec<f64>,
}

impl FisherMatrix {
    pub fn retention(&self) -> f64 {
        self.retained as f64 / self.generated.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundMatrix {
    pub matrix: Matrix,
    /// Condition number of the inverted Fisher matrix.
    pub condition: f64,
    pub m: usize,
}

macro_rules! dispatch_k {
    ($k:expr, $f:ident ( $($arg:expr),* )) => {
        match $k {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            k => Err(Error::UnsupportedDimension { found: k, reason: "score engine supports 1 to 4 parameters" }),
        }
    };
}

/// Dual-lifted parameter and caches for repeated scoring at one θ.
struct Prepared<const K: usize> {
    theta: Vec<f64>,
    theta_dual: Vec<Dual<K>>,
    cache: FlowCache<f64>,
    cache_dual: FlowCache<Dual<K>>,
}

impl<const K: usize> Prepared<K> {
    fn new(flow: &ConditionalFlow, theta: &[f64]) -> Result<Self> {
        let theta_dual: Vec<Dual<K>> = theta.iter().enumerate().map(|(i, &t)| Dual::variable(t, i)).collect();
        Ok(Self {
            theta: theta.to_vec(),
            cache: flow.prepare(theta)?,
            cache_dual: flow.prepare(&theta_dual)?,
            theta_dual,
        })
    }

    fn generate(&self, flow: &ConditionalFlow, z: &[f64]) -> Result<Vec<f64>> {
        Ok(flow.generate_cached(z, &self.theta, &self.cache)?.0)
    }

    fn log_prob_grad(&self, flow: &ConditionalFlow, gamma: &[f64]) -> Result<(f64, [f64; K])> {
        let g: Vec<Dual<K>> = gamma.iter().map(|&v| Dual::constant(v)).collect();
        let lp = flow.log_prob_cached(&g, &self.theta_dual, &self.cache_dual)?;
        if lp.eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score vector"));
        }
        Ok((lp.re, lp.eps))
    }
}

fn check_theta(flow: &ConditionalFlow, theta: &[f64]) -> Result<()> {
    if theta.len() != flow.theta_dim() {
        return Err(Error::ShapeMismatch(format!("θ has {} entries, flow takes {}", theta.len(), flow.theta_dim())));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("θ"));
    }
    Ok(())
}

fn score_hybrid_k<const K: usize>(flow: &ConditionalFlow, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    let p = Prepared::<K>::new(flow, theta)?;
    let gamma = p.generate(flow, z)?;
    Ok(p.log_prob_grad(flow, &gamma)?.1.to_vec())
}

/// Hybrid score `s_θ(z)`.
pub fn score_hybrid(flow: &ConditionalFlow, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_theta(flow, theta)?;
    dispatch_k!(theta.len(), score_hybrid_k(flow, z, theta))
}

fn log_prob_grad_k<const K: usize>(flow: &ConditionalFlow, gamma: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = Prepared::<K>::new(flow, theta)?;
    let (lp, g) = p.log_prob_grad(flow, gamma)?;
    Ok((lp, g.to_vec()))
}

/// `(log p_Γ(γ; θ), ∇_θ log p_Γ(γ; θ))` at an arbitrary measurement.
pub fn log_prob_grad(flow: &ConditionalFlow, gamma: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_theta(flow, theta)?;
    dispatch_k!(theta.len(), log_prob_grad_k(flow, gamma, theta))
}

/// Batch scorer at one θ for callers that evaluate many measurements.
pub struct ScoreEvaluator<'a> {
    flow: &'a ConditionalFlow,
    inner: Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a>,
}

impl<'a> ScoreEvaluator<'a> {
    pub fn new(flow: &'a ConditionalFlow, theta: &[f64]) -> Result<Self> {
        check_theta(flow, theta)?;
        fn make<'a, const K: usize>(
            flow: &'a ConditionalFlow,
            theta: &[f64],
        ) -> Result<Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a>> {
            let p = Prepared::<K>::new(flow, theta)?;
            Ok(Box::new(move |g| p.log_prob_grad(flow, g).map(|(lp, s)| (lp, s.to_vec()))))
        }
        let inner = dispatch_k!(theta.len(), make(flow, theta))?;
        Ok(Self { flow, inner })
    }

    pub fn flow(&self) -> &ConditionalFlow {
        self.flow
    }

    pub fn log_prob_grad(&self, gamma: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.inner)(gamma)
    }
}

/// Closed-form scores of the oracle generators: `Aᵀ L⁻ᵀ z` for the linear
/// model and `Σ_j 3(z_j² − 1)/θ` for the scale model.
pub fn score_closed_form(flow: &ConditionalFlow, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_theta(flow, theta)?;
    match flow.kind() {
        FlowKind::LinearOracle { a, l } => {
            let w = LuFactor::new(&l.transpose())?.solve(z)?;
            a.transpose().matvec(&w)
        }
        FlowKind::ScaleOracle { .. } => {
            let t = theta[0];
            if !(t > 0.0) {
                return Err(Error::NonPositiveTheta(t));
            }
            Ok(vec![z.iter().map(|v| 3.0 * (v * v - 1.0) / t).sum()])
        }
        _ => Err(Error::UnsupportedFlow("closed-form score needs the linear or scale generator".into())),
    }
}

/// Analytic ingredients of the generator-only score at one `(z, θ)`.
struct GeneratorPieces {
    /// `J_G = ∂G/∂z`.
    jac: Matrix,
    /// `∂G/∂θ_i` as column `i`.
    dg: Matrix,
    /// `∂J_G/∂θ_i`.
    djac_theta: Vec<Matrix>,
    /// `∂J_G/∂z_m`; empty when `J_G` does not depend on `z`.
    djac_z: Vec<Matrix>,
}

fn generator_pieces(flow: &ConditionalFlow, z: &[f64], theta: &[f64]) -> Result<GeneratorPieces> {
    let d = flow.dim();
    let k = flow.theta_dim();
    match flow.kind() {
        FlowKind::LinearOracle { a, l } => Ok(GeneratorPieces {
            jac: l.clone(),
            dg: a.clone(),
            djac_theta: vec![Matrix::zeros(d, d); k],
            djac_z: Vec::new(),
        }),
        FlowKind::ScaleOracle { sigma, .. } => {
            let t = theta[0];
            if !(t > 0.0) {
                return Err(Error::NonPositiveTheta(t));
            }
            let c: Vec<f64> = z.iter().map(|v| (sigma * v).cbrt()).collect();
            if c.iter().any(|v| v.abs() < f64::MIN_POSITIVE) {
                return Err(Error::DomainError("cube-root generator is singular at z = 0".into()));
            }
            let jac = Matrix::from_diag(&c.iter().map(|ci| t * sigma / (3.0 * ci * ci)).collect::<Vec<_>>());
            let dj_t = Matrix::from_diag(&c.iter().map(|ci| sigma / (3.0 * ci * ci)).collect::<Vec<_>>());
            let djac_z = (0..d)
                .map(|m| {
                    let mut dm = Matrix::zeros(d, d);
                    dm[(m, m)] = -2.0 * t * sigma * sigma / (9.0 * c[m].powi(5));
                    dm
                })
                .collect();
            Ok(GeneratorPieces { jac, dg: Matrix::column(&c), djac_theta: vec![dj_t], djac_z })
        }
        FlowKind::NlfOracle { spec, alpha, delta } => nlf_pieces(spec, *alpha, *delta, z, theta),
        FlowKind::Learned => {
            Err(Error::UnsupportedFlow("the generator-only score is implemented for analytic generators".into()))
        }
    }
}

fn nlf_pieces(spec: &EdgeSpec, alpha: f64, delta: f64, z: &[f64], theta: &[f64]) -> Result<GeneratorPieces> {
    let s = edge_profile(spec.h, theta)?;
    let (tp, tw) = (theta[0], theta[1]);
    let d = spec.dim();
    let a2 = alpha * alpha;
    let mut sd = vec![0.0; d];
    let mut dg = Matrix::zeros(d, 2);
    let mut dsd = [vec![0.0; d], vec![0.0; d]];
    let mut idx = 0;
    for (i, &si) in s.iter().enumerate() {
        let x = (tp - i as f64) / tw;
        // φ'(x) = −φ(1 − φ)
        let g = si * (1.0 - si);
        let ds = [-g / tw, g * x / tw];
        for _ in 0..spec.w {
            for ch in 0..spec.c {
                let dp = spec.p_high[ch] - spec.p_low[ch];
                let f = dp * si + spec.p_low[ch];
                let var = a2 * f + delta * delta;
                if !(var > 0.0) {
                    return Err(Error::DegenerateNoise(format!("variance {var}")));
                }
                let sig = var.sqrt();
                sd[idx] = sig;
                for j in 0..2 {
                    let df = dp * ds[j];
                    let dsig = a2 * df / (2.0 * sig);
                    dsd[j][idx] = dsig;
                    dg[(idx, j)] = df + z[idx] * dsig;
                }
                idx += 1;
            }
        }
    }
    Ok(GeneratorPieces {
        jac: Matrix::from_diag(&sd),
        dg,
        djac_theta: dsd.iter().map(|v| Matrix::from_diag(v)).collect(),
        djac_z: Vec::new(),
    })
}

/// Generator-only score
/// `s_i = zᵀ J⁻¹ ∂G/∂θ_i − tr(J⁻¹ ∂J/∂θ_i) − tr(J⁻¹ M_i)` with
/// `M_i = Σ_m (∂J/∂z_m) u_m`, `u = −J⁻¹ ∂G/∂θ_i`.
pub fn score_generator_form(flow: &ConditionalFlow, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_theta(flow, theta)?;
    if z.len() != flow.dim() {
        return Err(Error::ShapeMismatch("latent dimension".into()));
    }
    let p = generator_pieces(flow, z, theta)?;
    let lu = LuFactor::new(&p.jac)?;
    let jinv = lu.inverse()?;
    let d = flow.dim();
    let mut out = Vec::with_capacity(flow.theta_dim());
    for i in 0..flow.theta_dim() {
        let dgi: Vec<f64> = (0..d).map(|r| p.dg[(r, i)]).collect();
        let u = lu.solve(&dgi)?;
        let mut s: f64 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
        s -= jinv.matmul(&p.djac_theta[i])?.trace()?;
        if !p.djac_z.is_empty() {
            let mut mi = Matrix::zeros(d, d);
            for (m, dj) in p.djac_z.iter().enumerate() {
                let w = -u[m];
                for (dst, src) in mi.as_mut_slice().iter_mut().zip(dj.as_slice()) {
                    *dst += w * src;
                }
            }
            s -= jinv.matmul(&mi)?.trace()?;
        }
        out.push(s);
    }
    Ok(out)
}

/// Sampling options for [`egfim_with`].
#[derive(Clone, Copy, Debug)]
pub struct SamplingOptions<'r> {
    pub m: usize,
    pub seed: u64,
    pub region: Option<&'r TrustedRegion>,
}

fn needs_redraw(flow: &ConditionalFlow, z: &[f64]) -> bool {
    matches!(flow.kind(), FlowKind::ScaleOracle { .. }) && z.iter().any(|v| v.abs() < CUBE_ROOT_EXCLUSION)
}

fn egfim_k<const K: usize>(flow: &ConditionalFlow, theta: &[f64], opts: SamplingOptions) -> Result<FisherMatrix> {
    let p = Prepared::<K>::new(flow, theta)?;
    let d = flow.dim();
    let mut g = GaussianStream::seeded(opts.seed, stream::LATENT);
    let mut z = vec![0.0; d];
    let mut acc = [[0.0f64; K]; K];
    let mut sum = [0.0f64; K];
    let (mut generated, mut retained, mut redrawn) = (0usize, 0usize, 0usize);
    while retained < opts.m {
        g.fill(&mut z);
        if needs_redraw(flow, &z) {
            redrawn += 1;
            continue;
        }
        generated += 1;
        if generated % RETENTION_WINDOW == 0 && (retained as f64) < MIN_RETENTION * generated as f64 {
            return Err(Error::RetentionTooLow { retained, drawn: generated });
        }
        let gamma = p.generate(flow, &z)?;
        if let Some(region) = opts.region {
            if !region.contains(&gamma) {
                continue;
            }
        }
        let (_, s) = p.log_prob_grad(flow, &gamma)?;
        retained += 1;
        for i in 0..K {
            sum[i] += s[i];
            for j in i..K {
                acc[i][j] += s[i] * s[j];
            }
        }
    }
    if redrawn > 0 {
        log::info!("redrew {redrawn} latents at the generator singularity");
    }
    let inv = 1.0 / opts.m as f64;
    let matrix = Matrix::from_fn(K, K, |i, j| if i <= j { acc[i][j] * inv } else { acc[j][i] * inv });
    if !matrix.is_finite() {
        return Err(Error::NonFinite("Fisher matrix"));
    }
    check_degenerate(&matrix)?;
    Ok(FisherMatrix {
        matrix,
        m: opts.m,
        generated,
        retained,
        redrawn,
        score_mean: sum.iter().map(|v| v * inv).collect(),
    })
}

fn check_degenerate(fim: &Matrix) -> Result<()> {
    let eig = symmetric_eigenvalues(fim)?;
    let (lmin, lmax) = (eig[0], *eig.last().unwrap());
    if !(lmax > 0.0) || lmin < DEGENERATE_RATIO * lmax {
        return Err(Error::DegenerateFim { lambda_min: lmin, lambda_max: lmax });
    }
    Ok(())
}

/// Draw latents until `m` generated measurements fall in the
/// trusted region and average the outer products of their scores.
pub fn egfim_with(flow: &ConditionalFlow, theta: &[f64], opts: SamplingOptions) -> Result<FisherMatrix> {
    check_theta(flow, theta)?;
    if opts.m < flow.theta_dim() + 1 {
        return Err(Error::InvalidArgument(format!("m = {} is below k + 1", opts.m)));
    }
    dispatch_k!(theta.len(), egfim_k(flow, theta, opts))
}

pub fn egfim(flow: &ConditionalFlow, theta: &[f64], m: usize, seed: u64, region: Option<&TrustedRegion>) -> Result<FisherMatrix> {
    egfim_with(flow, theta, SamplingOptions { m, seed, region })
}

/// Mean of `m` trusted scores. The Fisher matrix is not required to be
/// well conditioned here, so single samples are accepted.
pub fn score_mean_diag(flow: &ConditionalFlow, theta: &[f64], m: usize, seed: u64, region: Option<&TrustedRegion>) -> Result<Vec<f64>> {
    let samples = score_samples(flow, theta, m, seed, region)?;
    let k = flow.theta_dim();
    let mut mean = vec![0.0; k];
    let mut n = 0usize;
    for s in samples.iter().filter_map(|s| s.score.as_ref()) {
        n += 1;
        for (a, b) in mean.iter_mut().zip(s) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    Ok(mean)
}

fn score_samples_k<const K: usize>(flow: &ConditionalFlow, theta: &[f64], opts: SamplingOptions) -> Result<Vec<ScoreSample>> {
    let p = Prepared::<K>::new(flow, theta)?;
    let mut g = GaussianStream::seeded(opts.seed, stream::LATENT);
    let mut out = Vec::new();
    let mut retained = 0;
    let mut z = vec![0.0; flow.dim()];
    while retained < opts.m {
        g.fill(&mut z);
        if needs_redraw(flow, &z) {
            continue;
        }
        if out.len() >= RETENTION_WINDOW && (retained as f64) < MIN_RETENTION * out.len() as f64 {
            return Err(Error::RetentionTooLow { retained, drawn: out.len() });
        }
        let gamma = p.generate(flow, &z)?;
        let trusted = opts.region.is_none_or(|r| r.contains(&gamma));
        let score = if trusted {
            retained += 1;
            Some(p.log_prob_grad(flow, &gamma)?.1.to_vec())
        } else {
            None
        };
        out.push(ScoreSample { z: z.clone(), gamma, score });
    }
    Ok(out)
}

/// Individual samples (trusted and trimmed) in generation order; same
/// stream as [`egfim`].
pub fn score_samples(flow: &ConditionalFlow, theta: &[f64], m: usize, seed: u64, region: Option<&TrustedRegion>) -> Result<Vec<ScoreSample>> {
    check_theta(flow, theta)?;
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    dispatch_k!(theta.len(), score_samples_k(flow, theta, SamplingOptions { m, seed, region }))
}

/// Invert an eGFIM into the eGCRB.
pub fn egcrb(fim: &FisherMatrix) -> Result<BoundMatrix> {
    check_degenerate(&fim.matrix)?;
    let condition = condition_number_spd(&fim.matrix)?;
    let matrix = if fim.matrix.rows() == 1 {
        Matrix::from_diag(&[1.0 / fim.matrix[(0, 0)]])
    } else {
        inverse_spd(&fim.matrix)?.symmetrized()
    };
    Ok(BoundMatrix { matrix, condition, m: fim.m })
}

/// `‖approx − truth‖₂ / ‖truth‖₂` in spectral norm.
pub fn relative_error(approx: &Matrix, truth: &Matrix) -> Result<f64> {
    let t = spectral_norm_sym(&truth.symmetrized())?;
    if t == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok(spectral_norm_sym(&approx.sub(truth)?.symmetrized())? / t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridError {
    pub max: f64,
    pub mean: f64,
    pub per_point: Vec<f64>,
}

/// Maximum and mean relative error of the eGCRB over a parameter grid.
pub fn mre_over_grid(
    flow: &ConditionalFlow,
    truth: impl Fn(&[f64]) -> Result<Matrix>,
    grid: &[Vec<f64>],
    m: usize,
    seed: u64,
    region: Option<&TrustedRegion>,
) -> Result<GridError> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty parameter grid".into()));
    }
    let mut per_point = Vec::with_capacity(grid.len());
    for theta in grid {
        let bound = egcrb(&egfim(flow, theta, m, seed, region)?)?;
        per_point.push(relative_error(&bound.matrix, &truth(theta)?)?);
    }
    Ok(GridError {
        max: per_point.iter().copied().fold(0.0, f64::max),
        mean: per_point.iter().sum::<f64>() / per_point.len() as f64,
        per_point,
    })
}

/// `NPRMSE_i = √diag_i / |ref_i|` and their root mean square.
pub fn nprmse_nrmse(bound: &Matrix, reference: &[f64]) -> Result<(Vec<f64>, f64)> {
    let diag = bound.diag();
    if diag.len() != reference.len() {
        return Err(Error::ShapeMismatch("bound and reference lengths".into()));
    }
    let mut per = Vec::with_capacity(diag.len());
    for (i, (&v, &r)) in diag.iter().zip(reference).enumerate() {
        if r == 0.0 {
            return Err(Error::ZeroReference(i));
        }
        if v < 0.0 {
            return Err(Error::DomainError(format!("negative bound diagonal {v} at {i}")));
        }
        per.push(v.sqrt() / r.abs());
    }
    let nrmse = (per.iter().map(|v| v * v).sum::<f64>() / per.len() as f64).sqrt();
    Ok((per, nrmse))
}

/// Gaussian stream used for latents; exposed for callers replaying a run.
pub fn latent_stream(seed: u64) -> GaussianStream<StreamRng> {
    GaussianStream::seeded(seed, stream::LATENT)
}

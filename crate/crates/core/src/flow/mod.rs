//! Conditional flows `γ = G(z; θ)` built from [`Layer`]s.
//!
//! Layers are stored in generative order: `generate` applies `layers[0]`
//! first, the normalizing pass walks the list backwards.

pub mod arch;
pub mod file;

use serde::{Deserialize, Serialize};

use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::layers::{
    AdditiveShift, CubeRoot, DenseLinear, Layer, LayerCache, NlfNoise, Signal, TapeLogDet,
};
use crate::linalg::Matrix;
use crate::oracles::channel::ChannelSpec;
use crate::oracles::edge::EdgeSpec;
use crate::score::TrustedRegion;

pub use arch::{linear_architecture, scale_architecture, Architecture};
pub use file::{load, save, MAGIC, VERSION};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Which generator a flow realizes. Oracle kinds are rebuilt from their
/// parameters; learned flows carry trainable layers.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowKind {
    Learned,
    LinearOracle { a: Matrix, l: Matrix },
    ScaleOracle { sigma: f64, stack: usize },
    NlfOracle { spec: EdgeSpec, alpha: f64, delta: f64 },
}

/// Where the training data came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: ChannelSpec,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub seed: u64,
    pub dataset: Option<DatasetInfo>,
    pub region: Option<TrustedRegion>,
    #[serde(default)]
    pub epochs: usize,
}

/// Fixed affine map `(θ − shift) / scale` applied before any layer sees θ.
/// Conditioners train poorly on raw parameter ranges far from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Conditioning {
    /// Per-column mean and standard deviation; constant columns keep unit scale.
    pub fn fit(theta: &Matrix) -> Result<Self> {
        let n = theta.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut shift = vec![0.0; theta.cols()];
        let mut scale = vec![0.0; theta.cols()];
        for r in 0..n {
            for (acc, v) in shift.iter_mut().zip(theta.row(r)) {
                *acc += v;
            }
        }
        shift.iter_mut().for_each(|v| *v /= n as f64);
        for r in 0..n {
            for ((acc, v), c) in scale.iter_mut().zip(theta.row(r)).zip(&shift) {
                *acc += (v - c) * (v - c);
            }
        }
        for v in &mut scale {
            let sd = (*v / n as f64).sqrt();
            *v = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        }
        Ok(Self { shift, scale })
    }

    fn validate(&self, theta_dim: usize) -> Result<()> {
        if self.shift.len() != theta_dim || self.scale.len() != theta_dim {
            return Err(Error::ShapeMismatch("conditioning length".into()));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("conditioning {self:?}")));
        }
        Ok(())
    }

    fn apply<T: Real>(&self, theta: &[T]) -> Vec<T> {
        theta.iter().zip(&self.shift).zip(&self.scale).map(|((&t, &c), &s)| (t - c) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlow {
    dim: usize,
    theta_dim: usize,
    layers: Vec<Layer>,
    kind: FlowKind,
    conditioning: Option<Conditioning>,
    pub meta: FlowMeta,
}

/// Per-layer θ caches for one parameter value.
pub type FlowCache<T> = Vec<LayerCache<T>>;

/// NLL of a batch and its gradient for every trainable parameter, in
/// [`ConditionalFlow::params`] order.
#[derive(Clone, Debug)]
pub struct NllGrad {
    pub nll: f64,
    pub grads: Vec<Matrix>,
}

impl ConditionalFlow {
    pub fn new(dim: usize, theta_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if dim == 0 || theta_dim == 0 {
            return Err(Error::InvalidArgument("flow needs positive data and parameter dimensions".into()));
        }
        Ok(Self { dim, theta_dim, layers, kind: FlowKind::Learned, conditioning: None, meta: FlowMeta::default() })
    }

    /// `G(z; θ) = z`.
    pub fn identity(dim: usize, theta_dim: usize) -> Result<Self> {
        Self::new(dim, theta_dim, Vec::new())
    }

    /// `G(z; θ) = Aθ + Lz`.
    pub fn linear_oracle(a: Matrix, l: Matrix) -> Result<Self> {
        if l.rows() != a.rows() || !l.is_square() || a.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "A is {}x{}, L is {}x{}",
                a.rows(),
                a.cols(),
                l.rows(),
                l.cols()
            )));
        }
        let layers = vec![
            Layer::DenseLinear(DenseLinear::new(l.clone())?),
            Layer::AdditiveShift(AdditiveShift::new(Signal::Linear(a.clone()))),
        ];
        Ok(Self {
            dim: l.rows(),
            theta_dim: a.cols(),
            layers,
            kind: FlowKind::LinearOracle { a, l },
            conditioning: None,
            meta: FlowMeta::default(),
        })
    }

    /// `γ_j = θ · cbrt(σ z_j)` on `stack` i.i.d. copies.
    pub fn scale_oracle(sigma: f64, stack: usize) -> Result<Self> {
        if !(sigma > 0.0) || stack == 0 {
            return Err(Error::InvalidArgument(format!("scale generator with σ = {sigma}, stack = {stack}")));
        }
        Ok(Self {
            dim: stack,
            theta_dim: 1,
            layers: vec![Layer::CubeRoot(CubeRoot::new(sigma))],
            kind: FlowKind::ScaleOracle { sigma, stack },
            conditioning: None,
            meta: FlowMeta::default(),
        })
    }

    /// `γ = f(θ) + √(α² f(θ) + δ²) ⊙ z` for an edge image `f`.
    pub fn nlf_oracle(spec: EdgeSpec, alpha: f64, delta: f64) -> Result<Self> {
        spec.validate()?;
        if !(delta > 0.0) && alpha == 0.0 {
            return Err(Error::DegenerateNoise("α = δ = 0".into()));
        }
        Ok(Self {
            dim: spec.dim(),
            theta_dim: 2,
            layers: vec![Layer::NlfNoise(NlfNoise::new(spec.clone(), alpha, delta))],
            kind: FlowKind::NlfOracle { spec, alpha, delta },
            conditioning: None,
            meta: FlowMeta::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn kind(&self) -> &FlowKind {
        &self.kind
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.kind, FlowKind::Learned)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn conditioning(&self) -> Option<&Conditioning> {
        self.conditioning.as_ref()
    }

    pub fn set_conditioning(&mut self, c: Option<Conditioning>) -> Result<()> {
        if let Some(c) = &c {
            c.validate(self.theta_dim)?;
        }
        self.conditioning = c;
        Ok(())
    }

    /// θ as the layers see it.
    fn cond<'a, T: Real>(&self, theta: &'a [T]) -> std::borrow::Cow<'a, [T]> {
        match &self.conditioning {
            Some(c) => std::borrow::Cow::Owned(c.apply(theta)),
            None => std::borrow::Cow::Borrowed(theta),
        }
    }

    fn check(&self, v: &[impl Copy], theta: &[impl Copy]) -> Result<()> {
        if v.len() != self.dim || theta.len() != self.theta_dim {
            return Err(Error::ShapeMismatch(format!(
                "flow is {}-dimensional with {} parameters, got {} and {}",
                self.dim,
                self.theta_dim,
                v.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    pub fn prepare<T: Real>(&self, theta: &[T]) -> Result<FlowCache<T>> {
        if theta.len() != self.theta_dim {
            return Err(Error::ShapeMismatch(format!("θ has {} entries, flow takes {}", theta.len(), self.theta_dim)));
        }
        let theta = self.cond(theta);
        self.layers.iter().map(|l| l.prepare(&theta)).collect()
    }

    /// Generative pass with `log|det ∂γ/∂z|`.
    pub fn generate_cached<T: Real>(&self, z: &[T], theta: &[T], cache: &FlowCache<T>) -> Result<(Vec<T>, T)> {
        self.check(z, theta)?;
        let theta_c = self.cond(theta);
        let theta = &*theta_c;
        let mut v = z.to_vec();
        let mut ld = T::zero();
        for (layer, c) in self.layers.iter().zip(cache) {
            let (next, l) = layer.forward(&v, theta, c)?;
            v = next;
            ld += l;
        }
        Ok((v, ld))
    }

    /// Normalizing pass with `log|det ∂z/∂γ|`.
    pub fn normalize_cached<T: Real>(&self, gamma: &[T], theta: &[T], cache: &FlowCache<T>) -> Result<(Vec<T>, T)> {
        self.check(gamma, theta)?;
        let theta_c = self.cond(theta);
        let theta = &*theta_c;
        let mut v = gamma.to_vec();
        let mut ld = T::zero();
        for (layer, c) in self.layers.iter().zip(cache).rev() {
            let (next, l) = layer.inverse(&v, theta, c)?;
            v = next;
            ld += l;
        }
        Ok((v, ld))
    }

    pub fn log_prob_cached<T: Real>(&self, gamma: &[T], theta: &[T], cache: &FlowCache<T>) -> Result<T> {
        let (z, ld) = self.normalize_cached(gamma, theta, cache)?;
        let sq = z.iter().fold(T::zero(), |acc, &v| acc + v * v);
        Ok(ld - sq * 0.5 - 0.5 * self.dim as f64 * LOG_2PI)
    }

    pub fn generate(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let cache = self.prepare(theta)?;
        Ok(self.generate_cached(z, theta, &cache)?.0)
    }

    pub fn normalize(&self, gamma: &[f64], theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        let cache = self.prepare(theta)?;
        self.normalize_cached(gamma, theta, &cache)
    }

    pub fn log_prob(&self, gamma: &[f64], theta: &[f64]) -> Result<f64> {
        let cache = self.prepare(theta)?;
        let lp = self.log_prob_cached(gamma, theta, &cache)?;
        if !lp.is_finite() {
            return Err(Error::NonFinite("log density"));
        }
        Ok(lp)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn n_weights(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Data-dependent actnorm initialization: the batch is pushed through
    /// the normalizing pass and every actnorm layer standardizes its input.
    pub fn init_actnorm(&mut self, x: &Matrix, theta: &Matrix) -> Result<()> {
        if x.rows() != theta.rows() || x.cols() != self.dim || theta.cols() != self.theta_dim {
            return Err(Error::ShapeMismatch("actnorm init batch".into()));
        }
        let theta = &self.cond_rows(theta);
        let mut cur = x.clone();
        for idx in (0..self.layers.len()).rev() {
            if let Layer::ActNorm(a) = &mut self.layers[idx] {
                a.init_from_data(&cur)?;
            }
            let layer = &self.layers[idx];
            let mut next = Matrix::zeros(cur.rows(), cur.cols());
            for r in 0..cur.rows() {
                let (v, _) = layer.inverse_at(cur.row(r), theta.row(r))?;
                next.row_mut(r).copy_from_slice(&v);
            }
            cur = next;
        }
        Ok(())
    }

    /// Mean NLL of a batch recorded on a tape. Returns the tape, the loss
    /// node and the parameter leaves.
    pub fn nll_tape(&self, x: &Matrix, theta: &Matrix) -> Result<(GradTape, Var, Vec<Var>)> {
        if !self.is_learned() {
            return Err(Error::UnsupportedFlow("only learned flows are trained".into()));
        }
        let n = x.rows();
        if n == 0 || theta.rows() != n || x.cols() != self.dim || theta.cols() != self.theta_dim {
            return Err(Error::ShapeMismatch("training batch".into()));
        }
        let mut tape = GradTape::new();
        let mut v = tape.leaf(x.clone());
        let th = tape.leaf(self.cond_rows(theta));
        // leaves are created per layer so indexing stays aligned
        let mut per_layer: Vec<Vec<Var>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            per_layer.push(layer.params().into_iter().map(|m| tape.leaf(m.clone())).collect());
        }
        let mut rows: Option<Var> = None;
        let mut scalar: Option<Var> = None;
        for (layer, params) in self.layers.iter().zip(&per_layer).rev() {
            let (next, ld) = layer.tape_inverse(&mut tape, v, th, params)?;
            v = next;
            match ld {
                TapeLogDet::Rows(r) => rows = Some(rows.map_or(r, |acc| tape.add(acc, r))),
                TapeLogDet::Scalar(s) => scalar = Some(scalar.map_or(s, |acc| tape.add(acc, s))),
            }
        }
        let sq = tape.square(v);
        let sq = tape.sum_rows(sq);
        let mut per_row = tape.scale(sq, 0.5);
        if let Some(r) = rows {
            per_row = tape.sub(per_row, r);
        }
        let total = tape.sum_all(per_row);
        let mean = tape.scale(total, 1.0 / n as f64);
        let mut loss = tape.add_scalar(mean, 0.5 * self.dim as f64 * LOG_2PI);
        if let Some(s) = scalar {
            loss = tape.sub(loss, s);
        }
        Ok((tape, loss, per_layer.into_iter().flatten().collect()))
    }

    pub fn nll_and_grad(&self, x: &Matrix, theta: &Matrix) -> Result<NllGrad> {
        let (tape, loss, leaves) = self.nll_tape(x, theta)?;
        let nll = tape.scalar(loss);
        let g = tape.backward(loss)?;
        let grads = leaves
            .iter()
            .map(|&v| {
                let (r, c) = tape.value(v).shape();
                g.get_or_zeros(v, r, c)
            })
            .collect();
        Ok(NllGrad { nll, grads })
    }

    /// Mean NLL by the scalar path, used to cross-check the tape.
    pub fn nll(&self, x: &Matrix, theta: &Matrix) -> Result<f64> {
        let mut acc = 0.0;
        for r in 0..x.rows() {
            acc -= self.log_prob(x.row(r), theta.row(r))?;
        }
        Ok(acc / x.rows() as f64)
    }

    fn cond_rows(&self, theta: &Matrix) -> Matrix {
        match &self.conditioning {
            Some(c) => {
                let mut out = theta.clone();
                for r in 0..out.rows() {
                    let row = c.apply(theta.row(r));
                    out.row_mut(r).copy_from_slice(&row);
                }
                out
            }
            None => theta.clone(),
        }
    }

    pub(crate) fn from_parts(dim: usize, theta_dim: usize, layers: Vec<Layer>, kind: FlowKind, meta: FlowMeta) -> Self {
        Self { dim, theta_dim, layers, kind, conditioning: None, meta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;

    #[test]
    fn conditioning_reparametrizes_theta() {
        let base = arch::scale_architecture(2, 1, 8, 2, 3).unwrap().randomized(0.5, 4);
        let mut shifted = base.clone();
        let c = Conditioning { shift: vec![4.0], scale: vec![2.0] };
        shifted.set_conditioning(Some(c)).unwrap();
        let x = [0.4, -1.1];
        let a = shifted.log_prob(&x, &[5.0]).unwrap();
        let b = base.log_prob(&x, &[0.5]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let z = [0.2, 0.7];
        assert_eq!(shifted.generate(&z, &[5.0]).unwrap(), base.generate(&z, &[0.5]).unwrap());
        let th = Matrix::from_rows(&[&[5.0], &[3.0]]).unwrap();
        let xs = Matrix::from_rows(&[&x, &[1.0, 2.0]]).unwrap();
        let th_base = Matrix::from_rows(&[&[0.5], &[-0.5]]).unwrap();
        assert!((shifted.nll(&xs, &th).unwrap() - base.nll(&xs, &th_base).unwrap()).abs() < 1e-14);
        assert!((shifted.nll_and_grad(&xs, &th).unwrap().nll - base.nll(&xs, &th_base).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn conditioning_fit_and_validation() {
        let th = Matrix::from_rows(&[&[1.0, 7.0], &[3.0, 7.0]]).unwrap();
        let c = Conditioning::fit(&th).unwrap();
        assert_eq!(c.shift, vec![2.0, 7.0]);
        assert_eq!(c.scale, vec![1.0, 1.0]);
        let mut f = ConditionalFlow::identity(2, 2).unwrap();
        assert!(f.set_conditioning(Some(Conditioning { shift: vec![0.0], scale: vec![1.0] })).is_err());
        assert!(f.set_conditioning(Some(Conditioning { shift: vec![0.0; 2], scale: vec![1.0, 0.0] })).is_err());
        assert!(Conditioning::fit(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn identity_densities() {
        let f = ConditionalFlow::identity(1, 1).unwrap();
        assert!((f.log_prob(&[0.0], &[0.0]).unwrap() + 0.5 * LOG_2PI).abs() < 1e-15);
        let f = ConditionalFlow::identity(2, 1).unwrap();
        let lp = f.log_prob(&[1.0, 0.0], &[0.0]).unwrap();
        assert!((lp + LOG_2PI + 0.5).abs() < 1e-15);
        assert_eq!(f.generate(&[0.3, -2.0], &[5.0]).unwrap(), vec![0.3, -2.0]);
    }

    #[test]
    fn linear_oracle_generates_mean_plus_noise() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 0.5]]).unwrap();
        let l = Matrix::from_rows(&[&[2.0, 0.0, 0.0], &[0.5, 1.0, 0.0], &[-1.0, 0.2, 3.0]]).unwrap();
        let f = ConditionalFlow::linear_oracle(a.clone(), l.clone()).unwrap();
        let z = [0.1, -0.7, 1.3];
        let th = [0.4, -1.1];
        let g = f.generate(&z, &th).unwrap();
        let at = a.matvec(&th).unwrap();
        let lz = l.matvec(&z).unwrap();
        for i in 0..3 {
            assert!((g[i] - at[i] - lz[i]).abs() < 1e-14);
        }
        let (back, _) = f.normalize(&g, &th).unwrap();
        for i in 0..3 {
            assert!((back[i] - z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn change_of_variables_bookkeeping() {
        let mut g = GaussianStream::seeded(3, 0);
        let flow = arch::scale_architecture(2, 1, 16, 2, 5).unwrap().randomized(0.3, 9);
        for _ in 0..20 {
            let z = g.vector(2);
            let th = [3.0 + g.next().abs()];
            let cache = flow.prepare(&th).unwrap();
            let (x, ld_fwd) = flow.generate_cached(&z, &th, &cache).unwrap();
            let lp = flow.log_prob(&x, &th).unwrap();
            let lz = -0.5 * (z[0] * z[0] + z[1] * z[1]) - LOG_2PI;
            assert!((lp - (lz - ld_fwd)).abs() < 1e-8);
        }
    }

    #[test]
    fn tape_nll_matches_scalar_path() {
        let flow = arch::linear_architecture(3, 2).unwrap().randomized(0.4, 4);
        let mut g = GaussianStream::seeded(5, 0);
        let x = g.matrix(7, 3);
        let th = g.matrix(7, 2);
        let tape = flow.nll_and_grad(&x, &th).unwrap();
        assert!((tape.nll - flow.nll(&x, &th).unwrap()).abs() < 1e-11);
    }

    #[test]
    fn actnorm_init_standardizes_the_first_layer() {
        let mut flow = arch::linear_architecture(2, 1).unwrap();
        let mut g = GaussianStream::seeded(6, 0);
        let mut x = g.matrix(500, 2);
        for r in 0..500 {
            x.row_mut(r)[0] = 3.0 * x.row(r)[0] + 7.0;
        }
        let th = g.matrix(500, 1);
        flow.init_actnorm(&x, &th).unwrap();
        // the data-side actnorm is the last layer in generative order
        let last = flow.layers().last().unwrap();
        let mean: f64 = (0..500).map(|r| last.inverse_at(x.row(r), th.row(r)).unwrap().0[0]).sum::<f64>() / 500.0;
        assert!(mean.abs() < 1e-10);
    }
}

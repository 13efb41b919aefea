//! Monotone rational-quadratic spline coupling.
//!
//! The rational direction (data → latent) is used for density evaluation; the
//! generative direction solves the per-bin quadratic in closed form. Outside
//! `[-bound, bound]` the map is the identity and the boundary derivatives are
//! pinned to one so the pieces join with slope one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::mlp::{Mlp, MlpShape};
use super::{split_point, TapeLogDet};

pub const MIN_BIN: f64 = 1e-3;
pub const MIN_DERIV: f64 = 1e-3;
const DEGENERATE_BIN: f64 = 1e-6;

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_BOUND: f64 = 4.0;

/// Knot positions and derivatives for one spline.
#[derive(Clone, Debug)]
pub struct RqKnots<T> {
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub ds: Vec<T>,
    bound: f64,
}

pub fn params_per_dim(bins: usize) -> usize {
    3 * bins - 1
}

fn deriv_shift() -> f64 {
    ((1.0 - MIN_DERIV).exp() - 1.0).ln()
}

fn bin_sizes<T: Real>(raw: &[T], what: &'static str) -> Result<Vec<T>> {
    let k = raw.len();
    let m = raw.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.re()));
    let e: Vec<T> = raw.iter().map(|&r| (r - m).exp()).collect();
    let total = e.iter().fold(T::zero(), |acc, &v| acc + v);
    let scale = 1.0 - k as f64 * MIN_BIN;
    let out: Vec<T> = e.iter().map(|&v| v / total * scale + MIN_BIN).collect();
    if let Some(bad) = out.iter().find(|v| !(v.re() >= DEGENERATE_BIN)) {
        return Err(Error::DegenerateBin { what, value: bad.re() });
    }
    Ok(out)
}

/// Build knots from `3K − 1` unconstrained values: `K` width logits, `K`
/// height logits and `K − 1` interior derivative pre-activations. All zeros
/// gives the identity map.
pub fn rq_knots<T: Real>(raw: &[T], bins: usize, bound: f64) -> Result<RqKnots<T>> {
    if raw.len() != params_per_dim(bins) || bins == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} spline parameters for {bins} bins",
            raw.len()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteNetworkOutput);
    }
    let widths = bin_sizes(&raw[..bins], "width")?;
    let heights = bin_sizes(&raw[bins..2 * bins], "height")?;
    let span = 2.0 * bound;
    let cumulate = |sizes: &[T]| {
        let mut knots = Vec::with_capacity(bins + 1);
        let mut acc = T::cst(-bound);
        knots.push(acc);
        for &s in &sizes[..bins - 1] {
            acc += s * span;
            knots.push(acc);
        }
        knots.push(T::cst(bound));
        knots
    };
    let shift = deriv_shift();
    let mut ds = Vec::with_capacity(bins + 1);
    ds.push(T::cst(1.0));
    for &r in &raw[2 * bins..] {
        ds.push((r + shift).softplus() + MIN_DERIV);
    }
    ds.push(T::cst(1.0));
    Ok(RqKnots { xs: cumulate(&widths), ys: cumulate(&heights), ds, bound })
}

fn find_bin<T: Real>(knots: &[T], v: f64) -> usize {
    let last = knots.len() - 2;
    let mut k = knots.partition_point(|x| x.re() <= v);
    k = k.saturating_sub(1);
    k.min(last)
}

/// Normalizing direction: value and log-derivative.
pub fn rq_apply<T: Real>(knots: &RqKnots<T>, x: T) -> (T, T) {
    let b = knots.bound;
    if x.re() <= -b || x.re() >= b {
        return (x, T::zero());
    }
    let k = find_bin(&knots.xs, x.re());
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = (x - x0) / w;
    let one_m = -xi + 1.0;
    let t = xi * one_m;
    let denom = s + (d1 + d0 - s * 2.0) * t;
    let y = y0 + h * (s * xi * xi + d0 * t) / denom;
    let num = d1 * xi * xi + s * t * 2.0 + d0 * one_m * one_m;
    let logd = s.ln() * 2.0 + num.ln() - denom.ln() * 2.0;
    (y, logd)
}

/// Generative direction: the preimage of `y` and the log-derivative of the
/// generative map at `y`.
pub fn rq_invert<T: Real>(knots: &RqKnots<T>, y: T) -> (T, T) {
    let b = knots.bound;
    if y.re() <= -b || y.re() >= b {
        return (y, T::zero());
    }
    let k = find_bin(&knots.ys, y.re());
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let dy = y - y0;
    let sum = d1 + d0 - s * 2.0;
    let qa = h * (s - d0) + dy * sum;
    let qb = h * d0 - dy * sum;
    let qc = -(s * dy);
    let mut disc = qb * qb - qa * qc * 4.0;
    if disc.re() < 0.0 {
        disc = disc - disc.re();
    }
    let xi = qc * 2.0 / (-qb - disc.sqrt());
    let x = x0 + xi * w;
    let one_m = -xi + 1.0;
    let t = xi * one_m;
    let denom = s + sum * t;
    let num = d1 * xi * xi + s * t * 2.0 + d0 * one_m * one_m;
    let logd = s.ln() * 2.0 + num.ln() - denom.ln() * 2.0;
    (x, -logd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub bound: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, bound: DEFAULT_BOUND }
    }
}

/// Coupling layer whose first block is pushed through per-dimension
/// splines parameterized by a network of the second block (and optionally θ).
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCoupling {
    pub(crate) dim: usize,
    pub(crate) theta_dim: usize,
    pub(crate) use_theta: bool,
    pub(crate) spline: SplineConfig,
    pub(crate) net: Mlp,
}

impl SplineCoupling {
    pub fn new(
        dim: usize,
        theta_dim: usize,
        use_theta: bool,
        spline: SplineConfig,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = split_point(dim);
        let inputs = dim - a + if use_theta { theta_dim } else { 0 };
        let shape = MlpShape { inputs, outputs: a * params_per_dim(spline.bins), hidden, layers };
        Ok(Self { dim, theta_dim, use_theta, spline, net: Mlp::new(shape, rng)? })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn raw<T: Real>(&self, fixed: &[T], theta: &[T]) -> Result<Vec<T>> {
        let mut input = fixed.to_vec();
        if self.use_theta {
            input.extend_from_slice(theta);
        }
        self.net.eval(&input)
    }

    fn apply<T: Real>(&self, v: &[T], theta: &[T], generative: bool) -> Result<(Vec<T>, T)> {
        let a = split_point(self.dim);
        let raw = self.raw(&v[a..], theta)?;
        let per = params_per_dim(self.spline.bins);
        let mut out = v.to_vec();
        let mut logdet = T::zero();
        for j in 0..a {
            let knots = rq_knots(&raw[j * per..(j + 1) * per], self.spline.bins, self.spline.bound)?;
            let (y, ld) = if generative { rq_invert(&knots, v[j]) } else { rq_apply(&knots, v[j]) };
            out[j] = y;
            logdet += ld;
        }
        Ok((out, logdet))
    }

    pub fn forward<T: Real>(&self, z: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        self.apply(z, theta, true)
    }

    pub fn inverse<T: Real>(&self, y: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        self.apply(y, theta, false)
    }

    pub fn tape_inverse(
        &self,
        tape: &mut GradTape,
        y: Var,
        theta: Var,
        params: &[Var],
    ) -> Result<(Var, TapeLogDet)> {
        let a = split_point(self.dim);
        let n = tape.value(y).rows();
        let ya = tape.slice_cols(y, 0, a);
        let yb = tape.slice_cols(y, a, self.dim - a);
        let input = if self.use_theta { tape.concat_cols(&[yb, theta]) } else { yb };
        let raw = self.net.tape(tape, input, params)?;
        let both = tape.rq_spline(ya, raw, self.spline.bins, self.spline.bound)?;
        let xa = tape.slice_cols(both, 0, a);
        let ld = tape.slice_cols(both, a, a);
        let ld = tape.sum_rows(ld);
        let x = if a < self.dim { tape.concat_cols(&[xa, yb]) } else { xa };
        debug_assert_eq!(tape.value(x).rows(), n);
        Ok((x, TapeLogDet::Rows(ld)))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }
}

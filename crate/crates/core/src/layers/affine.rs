use rand::Rng;

use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::mlp::{Mlp, MlpShape};
use super::{split_point, LayerCache, TapeLogDet};

const MIN_SCALE: f64 = 1e-12;

/// Per-dimension scale and bias, generative map `s ⊙ z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    pub(crate) scale: Matrix,
    pub(crate) bias: Matrix,
}

/// Standardizing parameters for a batch: `s = 1/std`, `b = −mean/std`, so
/// `s ⊙ x + b` has zero mean and unit (population) variance per column.
pub fn actnorm_data_init(batch: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 rows, got {n}")));
    }
    let mut s = Vec::with_capacity(batch.cols());
    let mut b = Vec::with_capacity(batch.cols());
    for c in 0..batch.cols() {
        let mean = (0..n).map(|r| batch[(r, c)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (batch[(r, c)] - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 1e-12) {
            return Err(Error::DegenerateBatch(format!("column {c} has variance {var:.3e}")));
        }
        let std = var.sqrt();
        s.push(1.0 / std);
        b.push(-mean / std);
    }
    Ok((s, b))
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        Self { scale: Matrix::filled(1, dim, 1.0), bias: Matrix::zeros(1, dim) }
    }

    pub fn new(scale: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::ShapeMismatch("actnorm scale and bias lengths".into()));
        }
        let d = scale.len();
        let layer = Self { scale: Matrix::new(1, d, scale)?, bias: Matrix::new(1, d, bias)? };
        layer.check()?;
        Ok(layer)
    }

    /// Install parameters so the normalizing direction standardizes `batch`.
    pub fn init_from_data(&mut self, batch: &Matrix) -> Result<()> {
        let (s, b) = actnorm_data_init(batch)?;
        for j in 0..s.len() {
            self.scale[(0, j)] = 1.0 / s[j];
            self.bias[(0, j)] = -b[j] / s[j];
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.scale.cols()
    }

    fn check(&self) -> Result<()> {
        if let Some(&s) = self.scale.as_slice().iter().find(|s| !(s.abs() >= MIN_SCALE)) {
            return Err(Error::ZeroScale(s));
        }
        Ok(())
    }

    fn log_det(&self) -> f64 {
        self.scale.as_slice().iter().map(|s| s.abs().ln()).sum()
    }

    pub fn forward<T: Real>(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        self.check()?;
        let out = z
            .iter()
            .zip(self.scale.as_slice().iter().zip(self.bias.as_slice()))
            .map(|(&v, (&s, &b))| v * s + b)
            .collect();
        Ok((out, T::cst(self.log_det())))
    }

    pub fn inverse<T: Real>(&self, y: &[T]) -> Result<(Vec<T>, T)> {
        self.check()?;
        let out = y
            .iter()
            .zip(self.scale.as_slice().iter().zip(self.bias.as_slice()))
            .map(|(&v, (&s, &b))| (v - b) / s)
            .collect();
        Ok((out, T::cst(-self.log_det())))
    }

    pub fn tape_inverse(&self, tape: &mut GradTape, y: Var, params: &[Var]) -> Result<(Var, TapeLogDet)> {
        self.check()?;
        let (s, b) = (params[0], params[1]);
        let nb = tape.neg(b);
        let centered = tape.add_row(y, nb);
        let inv = tape.recip(s);
        let x = tape.mul_row(centered, inv);
        let la = tape.log_abs(s);
        let ld = tape.sum_all(la);
        let ld = tape.neg(ld);
        Ok((x, TapeLogDet::Scalar(ld)))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.scale, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.scale, &mut self.bias]
    }
}

fn exp_affine<T: Real>(x: &[T], log_scale: &[T], shift: &[T]) -> Vec<T> {
    x.iter().zip(log_scale.iter().zip(shift)).map(|(&v, (&s, &b))| v * s.exp() + b).collect()
}

fn exp_affine_inv<T: Real>(y: &[T], log_scale: &[T], shift: &[T]) -> Vec<T> {
    y.iter().zip(log_scale.iter().zip(shift)).map(|(&v, (&s, &b))| (v - b) * (-s).exp()).collect()
}

fn sum<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b)
}

/// `z'ᴬ = exp(f_s(c)) ⊙ zᴬ + f_b(c)`, `z'ᴮ = zᴮ`, with `c = zᴮ` or `(zᴮ, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling {
    pub(crate) dim: usize,
    pub(crate) theta_dim: usize,
    pub(crate) use_theta: bool,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
}

impl AffineCoupling {
    pub fn new(
        dim: usize,
        theta_dim: usize,
        use_theta: bool,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = split_point(dim);
        let inputs = dim - a + if use_theta { theta_dim } else { 0 };
        let shape = MlpShape { inputs, outputs: a, hidden, layers };
        Ok(Self {
            dim,
            theta_dim,
            use_theta,
            scale_net: Mlp::new(shape, rng)?,
            shift_net: Mlp::new(shape, rng)?,
        })
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn shift_net_mut(&mut self) -> &mut Mlp {
        &mut self.shift_net
    }

    fn conditioner<T: Real>(&self, fixed: &[T], theta: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut input = fixed.to_vec();
        if self.use_theta {
            input.extend_from_slice(theta);
        }
        Ok((self.scale_net.eval(&input)?, self.shift_net.eval(&input)?))
    }

    pub fn forward<T: Real>(&self, z: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let a = split_point(self.dim);
        let (s, b) = self.conditioner(&z[a..], theta)?;
        let mut out = exp_affine(&z[..a], &s, &b);
        out.extend_from_slice(&z[a..]);
        Ok((out, sum(&s)))
    }

    pub fn inverse<T: Real>(&self, y: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let a = split_point(self.dim);
        let (s, b) = self.conditioner(&y[a..], theta)?;
        let mut out = exp_affine_inv(&y[..a], &s, &b);
        out.extend_from_slice(&y[a..]);
        Ok((out, -sum(&s)))
    }

    pub fn tape_inverse(
        &self,
        tape: &mut GradTape,
        y: Var,
        theta: Var,
        params: &[Var],
    ) -> Result<(Var, TapeLogDet)> {
        let a = split_point(self.dim);
        let ya = tape.slice_cols(y, 0, a);
        let yb = tape.slice_cols(y, a, self.dim - a);
        let input = if self.use_theta { tape.concat_cols(&[yb, theta]) } else { yb };
        let n = self.scale_net.n_params();
        let s = self.scale_net.tape(tape, input, &params[..n])?;
        let b = self.shift_net.tape(tape, input, &params[n..])?;
        let centered = tape.sub(ya, b);
        let ns = tape.neg(s);
        let e = tape.exp(ns);
        let xa = tape.mul(centered, e);
        let x = if a < self.dim { tape.concat_cols(&[xa, yb]) } else { xa };
        let ld = tape.sum_rows(s);
        let ld = tape.neg(ld);
        Ok((x, TapeLogDet::Rows(ld)))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.scale_net.params();
        p.extend(self.shift_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.scale_net.params_mut();
        p.extend(self.shift_net.params_mut());
        p
    }
}

/// `z' = exp(f_s(θ)) ⊙ z + f_b(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineInject {
    pub(crate) dim: usize,
    pub(crate) theta_dim: usize,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
}

impl AffineInject {
    pub fn new(dim: usize, theta_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        let shape = MlpShape { inputs: theta_dim, outputs: dim, hidden, layers };
        Ok(Self {
            dim,
            theta_dim,
            scale_net: Mlp::new(shape, rng)?,
            shift_net: Mlp::new(shape, rng)?,
        })
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn shift_net_mut(&mut self) -> &mut Mlp {
        &mut self.shift_net
    }

    pub fn prepare<T: Real>(&self, theta: &[T]) -> Result<LayerCache<T>> {
        Ok(LayerCache::Affine {
            log_scale: self.scale_net.eval(theta)?,
            shift: self.shift_net.eval(theta)?,
        })
    }

    pub fn forward<T: Real>(&self, z: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let LayerCache::Affine { log_scale, shift } = cache else {
            return Err(Error::InvalidArgument("inject layer needs its θ cache".into()));
        };
        Ok((exp_affine(z, log_scale, shift), sum(log_scale)))
    }

    pub fn inverse<T: Real>(&self, y: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        let LayerCache::Affine { log_scale, shift } = cache else {
            return Err(Error::InvalidArgument("inject layer needs its θ cache".into()));
        };
        Ok((exp_affine_inv(y, log_scale, shift), -sum(log_scale)))
    }

    pub fn tape_inverse(
        &self,
        tape: &mut GradTape,
        y: Var,
        theta: Var,
        params: &[Var],
    ) -> Result<(Var, TapeLogDet)> {
        let n = self.scale_net.n_params();
        let s = self.scale_net.tape(tape, theta, &params[..n])?;
        let b = self.shift_net.tape(tape, theta, &params[n..])?;
        let centered = tape.sub(y, b);
        let ns = tape.neg(s);
        let e = tape.exp(ns);
        let x = tape.mul(centered, e);
        let ld = tape.sum_rows(s);
        let ld = tape.neg(ld);
        Ok((x, TapeLogDet::Rows(ld)))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.scale_net.params();
        p.extend(self.shift_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.scale_net.params_mut();
        p.extend(self.shift_net.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn actnorm_examples() {
        let id = ActNorm::identity(3);
        let (y, ld) = id.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!((y, ld), (vec![1.0, -2.0, 0.5], 0.0));

        let two = ActNorm::new(vec![2.0, 2.0], vec![0.0, 0.0]).unwrap();
        let (y, ld) = two.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![2.0, 2.0]);
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-15);

        assert!(matches!(ActNorm::new(vec![1e-13], vec![0.0]), Err(Error::ZeroScale(_))));
    }

    #[test]
    fn data_init_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = Matrix::from_fn(64, 3, |_, c| rng.random_range(-1.0..1.0) * (c + 1) as f64 + c as f64);
        let mut layer = ActNorm::identity(3);
        layer.init_from_data(&batch).unwrap();
        let rows: Vec<Vec<f64>> = (0..64).map(|r| layer.inverse(batch.row(r)).unwrap().0).collect();
        for c in 0..3 {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / 64.0;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }

        let (s, b) = actnorm_data_init(&batch).unwrap();
        for r in 0..64 {
            for c in 0..3 {
                assert!((batch[(r, c)] * s[c] + b[c] - rows[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn data_init_edge_cases() {
        let standardized = Matrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]).unwrap();
        let (s, b) = actnorm_data_init(&standardized).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for v in b {
            assert!(v.abs() < 1e-12);
        }
        let constant = Matrix::filled(5, 2, 3.0);
        assert!(matches!(actnorm_data_init(&constant), Err(Error::DegenerateBatch(_))));
        assert!(actnorm_data_init(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn coupling_known_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = AffineCoupling::new(2, 1, false, 0, 1, &mut rng).unwrap();
        let (y, ld) = c.forward(&[1.0, 0.3], &[0.0]).unwrap();
        assert_eq!((y, ld), (vec![1.0, 0.3], 0.0));
        c.scale_net_mut().output_bias_mut()[(0, 0)] = 2f64.ln();
        c.shift_net_mut().output_bias_mut()[(0, 0)] = 0.25;
        let (y, ld) = c.forward(&[1.0, 0.3], &[0.0]).unwrap();
        assert!((y[0] - 2.25).abs() < 1e-15);
        assert!((ld - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn inject_identity_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inj = AffineInject::new(3, 2, 0, 1, &mut rng).unwrap();
        let cache = inj.prepare(&[0.4, -0.1]).unwrap();
        let (y, ld) = inj.forward(&[1.0, 2.0, 3.0], &cache).unwrap();
        assert_eq!((y, ld), (vec![1.0, 2.0, 3.0], 0.0));
    }
}

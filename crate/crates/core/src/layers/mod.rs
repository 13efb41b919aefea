//! Invertible conditional layers.
//!
//! Every layer's `forward` is the generative direction (latent → data) and
//! `inverse` the normalizing direction. Both return the transformed vector
//! and the log-determinant of that direction's Jacobian, and both are
//! generic over [`Real`] so the score engine can push duals through them.

pub mod affine;
pub mod lu;
pub mod mlp;
pub mod oracle;
pub mod spline;

use serde::{Deserialize, Serialize};

use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use affine::{actnorm_data_init, ActNorm, AffineCoupling, AffineInject};
pub use lu::LuLinear;
pub use mlp::{Mlp, MlpShape};
pub use oracle::{AdditiveShift, CubeRoot, DenseLinear, NlfNoise, Signal};
pub use spline::{SplineConfig, SplineCoupling};

/// Size of the transformed block in coupling layers, `⌈d/2⌉`.
pub fn split_point(dim: usize) -> usize {
    dim.div_ceil(2)
}

/// θ-only quantities computed once per parameter value.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    None,
    Affine { log_scale: Vec<T>, shift: Vec<T> },
    Diag { scale: Vec<T>, shift: Vec<T>, log_det: T },
    Shift(Vec<T>),
}

/// Log-determinant contribution recorded on a tape: one value per row, or a
/// single `1 × 1` value shared by the whole batch.
#[derive(Clone, Copy, Debug)]
pub enum TapeLogDet {
    Rows(Var),
    Scalar(Var),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    ActNorm(ActNorm),
    LuLinear(LuLinear),
    AffineCoupling(AffineCoupling),
    AffineInject(AffineInject),
    SplineCoupling(SplineCoupling),
    AdditiveShift(AdditiveShift),
    DenseLinear(DenseLinear),
    NlfNoise(NlfNoise),
    CubeRoot(CubeRoot),
}

/// Serializable architecture of a trainable layer; weights travel
/// separately as blobs in [`Layer::params`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    ActNorm { dim: usize },
    LuLinear { dim: usize },
    AffineCoupling { dim: usize, theta_dim: usize, use_theta: bool, net: MlpShape },
    AffineInject { dim: usize, theta_dim: usize, net: MlpShape },
    SplineCoupling { dim: usize, theta_dim: usize, use_theta: bool, spline: SplineConfig, net: MlpShape },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::LuLinear(_) => "lu_linear",
            Layer::AffineCoupling(_) => "affine_coupling",
            Layer::AffineInject(_) => "affine_inject",
            Layer::SplineCoupling(_) => "spline_coupling",
            Layer::AdditiveShift(_) => "additive_shift",
            Layer::DenseLinear(_) => "dense_linear",
            Layer::NlfNoise(_) => "nlf_noise",
            Layer::CubeRoot(_) => "cube_root",
        }
    }

    pub fn prepare<T: Real>(&self, theta: &[T]) -> Result<LayerCache<T>> {
        match self {
            Layer::AffineInject(l) => l.prepare(theta),
            Layer::AdditiveShift(l) => l.prepare(theta),
            Layer::NlfNoise(l) => l.prepare(theta),
            _ => Ok(LayerCache::None),
        }
    }

    /// Generative direction with `log|det ∂z'/∂z|`.
    pub fn forward<T: Real>(&self, z: &[T], theta: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        match self {
            Layer::ActNorm(l) => l.forward(z),
            Layer::LuLinear(l) => l.forward(z),
            Layer::AffineCoupling(l) => l.forward(z, theta),
            Layer::AffineInject(l) => l.forward(z, cache),
            Layer::SplineCoupling(l) => l.forward(z, theta),
            Layer::AdditiveShift(l) => l.forward(z, cache),
            Layer::DenseLinear(l) => l.forward(z),
            Layer::NlfNoise(l) => l.forward(z, cache),
            Layer::CubeRoot(l) => l.forward(z, theta),
        }
    }

    /// Normalizing direction with `log|det ∂z/∂z'|`.
    pub fn inverse<T: Real>(&self, y: &[T], theta: &[T], cache: &LayerCache<T>) -> Result<(Vec<T>, T)> {
        match self {
            Layer::ActNorm(l) => l.inverse(y),
            Layer::LuLinear(l) => l.inverse(y),
            Layer::AffineCoupling(l) => l.inverse(y, theta),
            Layer::AffineInject(l) => l.inverse(y, cache),
            Layer::SplineCoupling(l) => l.inverse(y, theta),
            Layer::AdditiveShift(l) => l.inverse(y, cache),
            Layer::DenseLinear(l) => l.inverse(y),
            Layer::NlfNoise(l) => l.inverse(y, cache),
            Layer::CubeRoot(l) => l.inverse(y, theta),
        }
    }

    /// Convenience wrapper that prepares the θ cache on the fly.
    pub fn forward_at<T: Real>(&self, z: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let cache = self.prepare(theta)?;
        self.forward(z, theta, &cache)
    }

    pub fn inverse_at<T: Real>(&self, y: &[T], theta: &[T]) -> Result<(Vec<T>, T)> {
        let cache = self.prepare(theta)?;
        self.inverse(y, theta, &cache)
    }

    /// Batched normalizing pass on a tape. `params` are leaves matching
    /// [`Layer::params`].
    pub fn tape_inverse(
        &self,
        tape: &mut GradTape,
        y: Var,
        theta: Var,
        params: &[Var],
    ) -> Result<(Var, TapeLogDet)> {
        match self {
            Layer::ActNorm(l) => l.tape_inverse(tape, y, params),
            Layer::LuLinear(l) => l.tape_inverse(tape, y, params),
            Layer::AffineCoupling(l) => l.tape_inverse(tape, y, theta, params),
            Layer::AffineInject(l) => l.tape_inverse(tape, y, theta, params),
            Layer::SplineCoupling(l) => l.tape_inverse(tape, y, theta, params),
            other => Err(Error::UnsupportedFlow(format!("{} layer is not trainable", other.name()))),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.desc().is_some()
    }

    /// Trainable parameters; empty for analytic layers.
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Layer::ActNorm(l) => l.params(),
            Layer::LuLinear(l) => l.params(),
            Layer::AffineCoupling(l) => l.params(),
            Layer::AffineInject(l) => l.params(),
            Layer::SplineCoupling(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Layer::ActNorm(l) => l.params_mut(),
            Layer::LuLinear(l) => l.params_mut(),
            Layer::AffineCoupling(l) => l.params_mut(),
            Layer::AffineInject(l) => l.params_mut(),
            Layer::SplineCoupling(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn desc(&self) -> Option<LayerDesc> {
        Some(match self {
            Layer::ActNorm(l) => LayerDesc::ActNorm { dim: l.dim() },
            Layer::LuLinear(l) => LayerDesc::LuLinear { dim: l.dim() },
            Layer::AffineCoupling(l) => LayerDesc::AffineCoupling {
                dim: l.dim,
                theta_dim: l.theta_dim,
                use_theta: l.use_theta,
                net: l.scale_net.shape(),
            },
            Layer::AffineInject(l) => {
                LayerDesc::AffineInject { dim: l.dim, theta_dim: l.theta_dim, net: l.scale_net.shape() }
            }
            Layer::SplineCoupling(l) => LayerDesc::SplineCoupling {
                dim: l.dim,
                theta_dim: l.theta_dim,
                use_theta: l.use_theta,
                spline: l.spline,
                net: l.net.shape(),
            },
            _ => return None,
        })
    }

    /// Rebuild a trainable layer from its descriptor and weights.
    pub fn from_desc(desc: &LayerDesc, mut blobs: Vec<Matrix>) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptFile(format!("{what} parameters"));
        let check = |blobs: &[Matrix], shapes: &[(usize, usize)]| -> Result<()> {
            if blobs.len() != shapes.len() || blobs.iter().zip(shapes).any(|(b, s)| b.shape() != *s) {
                return Err(corrupt("layer"));
            }
            Ok(())
        };
        Ok(match desc {
            LayerDesc::ActNorm { dim } => {
                check(&blobs, &[(1, *dim), (1, *dim)])?;
                let bias = blobs.pop().unwrap();
                let scale = blobs.pop().unwrap();
                Layer::ActNorm(ActNorm { scale, bias })
            }
            LayerDesc::LuLinear { dim } => {
                check(&blobs, &[(*dim, *dim), (*dim, *dim), (1, *dim)])?;
                let log_scale = blobs.pop().unwrap();
                let upper = blobs.pop().unwrap();
                let lower = blobs.pop().unwrap();
                Layer::LuLinear(LuLinear { lower, upper, log_scale })
            }
            LayerDesc::AffineCoupling { dim, theta_dim, use_theta, net } => {
                let n = 2 * net.layers;
                if blobs.len() != 2 * n {
                    return Err(corrupt("coupling"));
                }
                let shift = blobs.split_off(n);
                Layer::AffineCoupling(AffineCoupling {
                    dim: *dim,
                    theta_dim: *theta_dim,
                    use_theta: *use_theta,
                    scale_net: Mlp::from_params(*net, blobs)?,
                    shift_net: Mlp::from_params(*net, shift)?,
                })
            }
            LayerDesc::AffineInject { dim, theta_dim, net } => {
                let n = 2 * net.layers;
                if blobs.len() != 2 * n {
                    return Err(corrupt("inject"));
                }
                let shift = blobs.split_off(n);
                Layer::AffineInject(AffineInject {
                    dim: *dim,
                    theta_dim: *theta_dim,
                    scale_net: Mlp::from_params(*net, blobs)?,
                    shift_net: Mlp::from_params(*net, shift)?,
                })
            }
            LayerDesc::SplineCoupling { dim, theta_dim, use_theta, spline, net } => {
                Layer::SplineCoupling(SplineCoupling {
                    dim: *dim,
                    theta_dim: *theta_dim,
                    use_theta: *use_theta,
                    spline: *spline,
                    net: Mlp::from_params(*net, blobs)?,
                })
            }
        })
    }
}


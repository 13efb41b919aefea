//! Fixed flow architectures for the toy channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::spline::DEFAULT_BINS;
use crate::layers::{ActNorm, AffineCoupling, AffineInject, Layer, LuLinear, SplineConfig, SplineCoupling};
use crate::rng::{stream, stream_rng};

use super::ConditionalFlow;

pub const SCALE_BLOCKS: usize = 2;
pub const SCALE_HIDDEN: usize = 64;
pub const SCALE_LAYERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// One block with single-layer (affine) conditioners.
    Linear,
    /// Spline-coupling blocks with deep conditioners.
    Scale {
        #[serde(default = "default_blocks")]
        blocks: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_layers")]
        layers: usize,
        /// Feed θ to the spline conditioners too, not only to the inject layers.
        #[serde(default)]
        spline_theta: bool,
        #[serde(default = "default_bins")]
        bins: usize,
    },
}

fn default_blocks() -> usize {
    SCALE_BLOCKS
}
fn default_hidden() -> usize {
    SCALE_HIDDEN
}
fn default_layers() -> usize {
    SCALE_LAYERS
}
fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Architecture {
    pub fn scale_default() -> Self {
        Architecture::Scale { blocks: SCALE_BLOCKS, hidden: SCALE_HIDDEN, layers: SCALE_LAYERS, spline_theta: false, bins: DEFAULT_BINS }
    }

    pub fn build(&self, dim: usize, theta_dim: usize, seed: u64) -> Result<ConditionalFlow> {
        match *self {
            Architecture::Linear => linear_architecture(dim, theta_dim),
            Architecture::Scale { blocks, hidden, layers, spline_theta, bins } => {
                let spline = SplineConfig { bins, ..SplineConfig::default() };
                blocks_flow(dim, theta_dim, blocks, hidden, layers, spline_theta, spline, seed)
            }
        }
    }
}

/// Normalizing order per block: actnorm, LU linear, affine inject, affine
/// coupling, all conditioners a single affine map.
pub fn linear_architecture(dim: usize, theta_dim: usize) -> Result<ConditionalFlow> {
    if dim < 2 {
        return Err(Error::UnsupportedDimension { found: dim, reason: "affine coupling needs d >= 2" });
    }
    // single-layer conditioners have only a zero-initialized output layer
    let mut rng = stream_rng(0, stream::INIT);
    let block = [
        Layer::AffineCoupling(AffineCoupling::new(dim, theta_dim, false, 0, 1, &mut rng)?),
        Layer::AffineInject(AffineInject::new(dim, theta_dim, 0, 1, &mut rng)?),
        Layer::LuLinear(LuLinear::identity_init(dim)),
        Layer::ActNorm(ActNorm::identity(dim)),
    ];
    ConditionalFlow::new(dim, theta_dim, block.to_vec())
}

/// `blocks` blocks of actnorm, LU linear, affine inject and spline coupling
/// (normalizing order). θ enters through the inject layers only; with
/// `d = 1` the spline has no fixed half and is a free monotone map.
pub fn scale_architecture(dim: usize, theta_dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<ConditionalFlow> {
    blocks_flow(dim, theta_dim, SCALE_BLOCKS, hidden, layers, false, SplineConfig::default(), seed)
}

fn blocks_flow(
    dim: usize,
    theta_dim: usize,
    blocks: usize,
    hidden: usize,
    layers: usize,
    spline_theta: bool,
    spline: SplineConfig,
    seed: u64,
) -> Result<ConditionalFlow> {
    if blocks == 0 || layers == 0 {
        return Err(Error::InvalidArgument("need at least one block and one conditioner layer".into()));
    }
    let mut rng = stream_rng(seed, stream::INIT);
    let mut out = Vec::with_capacity(4 * blocks);
    for _ in 0..blocks {
        out.push(Layer::SplineCoupling(SplineCoupling::new(dim, theta_dim, spline_theta, spline, hidden, layers, &mut rng)?));
        out.push(Layer::AffineInject(AffineInject::new(dim, theta_dim, hidden, layers, &mut rng)?));
        out.push(Layer::LuLinear(LuLinear::identity_init(dim)));
        out.push(Layer::ActNorm(ActNorm::identity(dim)));
    }
    ConditionalFlow::new(dim, theta_dim, out)
}

impl ConditionalFlow {
    /// Perturb every trainable weight uniformly in `±scale` (actnorm scales
    /// multiplicatively). Used to build non-trivial test configurations.
    pub fn randomized(mut self, scale: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream::INIT);
        for layer in self.layers_mut() {
            randomize_layer(layer, scale, &mut rng);
        }
        self
    }
}

pub fn randomize_layer(layer: &mut Layer, scale: f64, rng: &mut impl Rng) {
    match layer {
        Layer::ActNorm(a) => {
            for v in a.scale.as_mut_slice() {
                *v = rng.random_range(-scale..scale).exp();
            }
            for v in a.bias.as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
        Layer::LuLinear(l) => l.randomize(rng, scale),
        Layer::AffineCoupling(c) => {
            c.scale_net.randomize(rng, scale);
            c.shift_net.randomize(rng, scale);
        }
        Layer::AffineInject(c) => {
            c.scale_net.randomize(rng, scale);
            c.shift_net.randomize(rng, scale);
        }
        Layer::SplineCoupling(s) => s.net.randomize(rng, scale),
        _ => {}
    }
}

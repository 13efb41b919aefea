use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{GradTape, Real, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub inputs: usize,
    pub outputs: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl MlpShape {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.inputs];
        s.extend(std::iter::repeat(self.hidden).take(self.layers.saturating_sub(1)));
        s.push(self.outputs);
        s
    }
}

/// Fully connected network with SiLU between layers and a linear output.
/// Weights are stored `fan_in × fan_out` so a batch multiplies on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    shape: MlpShape,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl Mlp {
    /// Hidden layers get Kaiming-uniform weights; the output layer starts at
    /// zero so a fresh conditioner outputs exactly zero.
    pub fn new(shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        if shape.layers == 0 || shape.outputs == 0 {
            return Err(Error::InvalidArgument("MLP needs at least one layer and output".into()));
        }
        if shape.layers > 1 && shape.hidden == 0 {
            return Err(Error::InvalidArgument("MLP hidden width must be positive".into()));
        }
        let sizes = shape.sizes();
        let mut weights = Vec::with_capacity(shape.layers);
        let mut biases = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l + 1 == shape.layers;
            let w = if last || fan_in == 0 {
                Matrix::zeros(fan_in, fan_out)
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
            };
            weights.push(w);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self { shape, weights, biases })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    /// Overwrite every weight and bias with uniform draws in `±scale`.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for m in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in m.as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    /// Output-layer bias, handy for constructing known maps in tests.
    pub fn output_bias_mut(&mut self) -> &mut Matrix {
        self.biases.last_mut().expect("at least one layer")
    }

    pub fn output_weight_mut(&mut self) -> &mut Matrix {
        self.weights.last_mut().expect("at least one layer")
    }

    /// Parameters in storage order: `W₁, b₁, W₂, b₂, …`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn n_params(&self) -> usize {
        2 * self.shape.layers
    }

    pub fn eval<T: Real>(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.shape.inputs {
            return Err(Error::ShapeMismatch(format!(
                "MLP expects {} inputs, got {}",
                self.shape.inputs,
                input.len()
            )));
        }
        let mut h: Vec<T> = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next: Vec<T> = b.as_slice().iter().map(|&v| T::cst(v)).collect();
            for (i, &x) in h.iter().enumerate() {
                for (o, &wij) in next.iter_mut().zip(w.row(i)) {
                    *o += x * wij;
                }
            }
            if l + 1 < self.shape.layers {
                next.iter_mut().for_each(|v| *v = v.silu());
            }
            h = next;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteNetworkOutput);
        }
        Ok(h)
    }

    /// Batched evaluation on a tape; `params` are leaves matching
    /// [`Mlp::params`].
    pub fn tape(&self, tape: &mut GradTape, input: Var, params: &[Var]) -> Result<Var> {
        let mut h = input;
        for l in 0..self.shape.layers {
            let z = tape.matmul(h, params[2 * l]);
            let z = tape.add_row(z, params[2 * l + 1]);
            h = if l + 1 < self.shape.layers { tape.silu(z) } else { z };
        }
        if !tape.value(h).is_finite() {
            return Err(Error::NonFiniteNetworkOutput);
        }
        Ok(h)
    }

    pub(crate) fn from_params(shape: MlpShape, params: Vec<Matrix>) -> Result<Self> {
        let sizes = shape.sizes();
        if params.len() != 2 * shape.layers {
            return Err(Error::CorruptFile("MLP parameter count".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in params.chunks(2).enumerate() {
            if pair[0].shape() != (sizes[l], sizes[l + 1]) || pair[1].shape() != (1, sizes[l + 1]) {
                return Err(Error::CorruptFile("MLP parameter shape".into()));
            }
            weights.push(pair[0].clone());
            biases.push(pair[1].clone());
        }
        Ok(Self { shape, weights, biases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = MlpShape { inputs: 3, outputs: 2, hidden: 16, layers: 4 };
        let m = Mlp::new(shape, &mut rng).unwrap();
        assert_eq!(m.eval(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = MlpShape { inputs: 2, outputs: 1, hidden: 0, layers: 1 };
        let mut m = Mlp::new(shape, &mut rng).unwrap();
        m.output_weight_mut().as_mut_slice().copy_from_slice(&[2.0, -1.0]);
        m.output_bias_mut()[(0, 0)] = 0.5;
        assert_eq!(m.eval(&[1.0, 3.0]).unwrap(), vec![-0.5]);
    }

    #[test]
    fn tape_matches_scalar_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = MlpShape { inputs: 3, outputs: 2, hidden: 5, layers: 3 };
        let mut m = Mlp::new(shape, &mut rng).unwrap();
        m.randomize(&mut rng, 0.8);
        let batch = Matrix::from_fn(4, 3, |r, c| (r as f64 - 1.5) * 0.4 + c as f64 * 0.1);
        let mut t = GradTape::new();
        let x = t.leaf(batch.clone());
        let p: Vec<Var> = m.params().into_iter().map(|p| t.leaf(p.clone())).collect();
        let out = m.tape(&mut t, x, &p).unwrap();
        for r in 0..4 {
            let scalar = m.eval(batch.row(r)).unwrap();
            for (a, b) in scalar.iter().zip(t.value(out).row(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

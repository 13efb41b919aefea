//! Dataset synthesis and maximum-likelihood training with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, Conditioning, DatasetInfo};
use crate::linalg::Matrix;
use crate::oracles::channel::ChannelSpec;
use crate::rng::{permutation, stream, stream_rng, GaussianStream};

/// Global gradient-norm ceiling.
pub const GRAD_CLIP: f64 = 1e3;
/// Reference budget the dataset sweep keeps constant: 90 epochs of 200k.
pub const REFERENCE_EPOCHS: usize = 90;
pub const REFERENCE_SIZE: usize = 200_000;

/// Pairs `(θ_i, r_i)` stored row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub theta: Matrix,
    pub r: Matrix,
    pub spec: ChannelSpec,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.rows() == 0
    }

    pub fn info(&self) -> DatasetInfo {
        DatasetInfo { spec: self.spec.clone(), size: self.len(), seed: self.seed }
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(idx.len(), m.cols());
            for (dst, &src) in idx.iter().enumerate() {
                out.row_mut(dst).copy_from_slice(m.row(src));
            }
            out
        };
        (pick(&self.r), pick(&self.theta))
    }
}

/// Draw `n` parameters uniformly from the spec's box and one measurement
/// per parameter.
pub fn synthesize_dataset(spec: &ChannelSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if matches!(spec, ChannelSpec::EdgeWgn { .. } | ChannelSpec::EdgeNlf { .. }) {
        return Err(Error::UnsupportedSpec(format!("no training protocol for the {} channel", spec.name())));
    }
    spec.theta_box().validate()?;
    let (d, k) = (spec.dim(), spec.theta_dim());
    let mut g = GaussianStream::seeded(seed, stream::DATASET);
    let mut theta = Matrix::zeros(n, k);
    let mut r = Matrix::zeros(n, d);
    for i in 0..n {
        let th = spec.theta_box().sample(g.rng_mut());
        let sample = spec.sample(&th, &mut g)?;
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("synthesized measurement"));
        }
        theta.row_mut(i).copy_from_slice(&th);
        r.row_mut(i).copy_from_slice(&sample);
    }
    Ok(Dataset { theta, r, spec: spec.clone(), seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dataset_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: REFERENCE_EPOCHS,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dataset_size: REFERENCE_SIZE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::InvalidArgument("batch and dataset sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam hyper-parameters out of range".into()));
        }
        Ok(())
    }
}

/// `⌈90 · 200000 / n⌉`: keeps the number of gradient updates fixed.
pub fn sweep_epochs_for_size(n: usize) -> usize {
    assert!(n > 0, "dataset size must be positive");
    (REFERENCE_EPOCHS * REFERENCE_SIZE).div_ceil(n)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn first_moment(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Matrix] {
        &self.v
    }

    /// One bias-corrected update. Weights are untouched if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::ShapeMismatch("parameters and gradients".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            let w = params[i].as_mut_slice();
            for j in 0..w.len() {
                let gj = g.as_slice()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean NLL per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
    pub clipped: u64,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::ShapeMismatch(_) | Error::UnsupportedFlow(_) | Error::InvalidArgument(_) => e,
        _ => Error::DivergedTraining { epoch, loss: f64::NAN },
    }
}

pub fn train(flow: &mut ConditionalFlow, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(flow, data, cfg, |_, _| {})
}

/// Train in place; `on_epoch(epoch, mean_nll)` runs after every epoch.
pub fn train_with(
    flow: &mut ConditionalFlow,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let mut t = Trainer::new(flow, data, cfg)?;
    for _ in 0..cfg.epochs {
        let mean = t.epoch(flow, data)?;
        on_epoch(t.epochs_done() - 1, mean);
    }
    Ok(t.finish(flow, data))
}

/// Epoch-at-a-time training state, for callers that inspect the flow
/// between epochs.
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    trace: Vec<f64>,
    clipped: u64,
}

impl Trainer {
    pub fn new(flow: &ConditionalFlow, data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !flow.is_learned() {
            return Err(Error::UnsupportedFlow("only learned flows are trained".into()));
        }
        if data.r.cols() != flow.dim() || data.theta.cols() != flow.theta_dim() {
            return Err(Error::ShapeMismatch("dataset and flow dimensions".into()));
        }
        Ok(Self { cfg: cfg.clone(), adam: Adam::new(cfg), trace: Vec::new(), clipped: 0 })
    }

    pub fn epochs_done(&self) -> usize {
        self.trace.len()
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.trace
    }

    /// One pass over a fresh permutation; returns the mean batch NLL.
    pub fn epoch(&mut self, flow: &mut ConditionalFlow, data: &Dataset) -> Result<f64> {
        let epoch = self.trace.len();
        let n = data.len();
        let order = permutation(n, &mut stream_rng(shuffle_seed(self.cfg.seed, epoch), stream::SHUFFLE));
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, th) = data.gather(idx);
            if epoch == 0 && b == 0 {
                flow.set_conditioning(Some(Conditioning::fit(&data.theta)?))?;
                flow.init_actnorm(&x, &th).map_err(|e| diverged(epoch, e))?;
            }
            let mut ng = flow.nll_and_grad(&x, &th).map_err(|e| diverged(epoch, e))?;
            if !ng.nll.is_finite() {
                return Err(Error::DivergedTraining { epoch, loss: ng.nll });
            }
            let norm = ng.grads.iter().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::DivergedTraining { epoch, loss: ng.nll });
            }
            if norm > GRAD_CLIP {
                self.clipped += 1;
                log::debug!("epoch {epoch}: clipping gradient norm {norm:.3e}");
                let s = GRAD_CLIP / norm;
                ng.grads.iter_mut().for_each(|g| g.as_mut_slice().iter_mut().for_each(|v| *v *= s));
            }
            self.adam.step(flow.params_mut(), &ng.grads)?;
            total += ng.nll * idx.len() as f64;
        }
        let mean = total / n as f64;
        if epoch > 0 && epoch < 5 && mean > self.trace[epoch - 1] {
            log::warn!("mean NLL rose from {:.6} to {mean:.6} at epoch {epoch}", self.trace[epoch - 1]);
        }
        self.trace.push(mean);
        Ok(mean)
    }

    /// Record provenance on the flow and return the run summary.
    pub fn finish(self, flow: &mut ConditionalFlow, data: &Dataset) -> TrainReport {
        if self.clipped > 0 {
            log::info!("gradient clipped on {} steps", self.clipped);
        }
        flow.meta.seed = self.cfg.seed;
        flow.meta.dataset = Some(data.info());
        flow.meta.epochs = self.trace.len();
        TrainReport { loss_trace: self.trace, steps: self.adam.t, clipped: self.clipped }
    }
}

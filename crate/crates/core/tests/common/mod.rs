//! Finite-difference checks shared by the integration targets.
#![allow(dead_code)]

use gcrb::diff::{fd_jacobian, FD_STEP};
use gcrb::flow::arch::randomize_layer;
use gcrb::flow::ConditionalFlow;
use gcrb::layers::{
    ActNorm, AdditiveShift, AffineCoupling, AffineInject, CubeRoot, DenseLinear, Layer, LuLinear, NlfNoise, Signal,
    SplineConfig, SplineCoupling,
};
use gcrb::linalg::{LuFactor, Matrix};
use gcrb::oracles::edge::EdgeSpec;
use gcrb::rng::{stream_rng, GaussianStream};
use rand::Rng;

pub const LAYER_KINDS: [&str; 9] = [
    "actnorm",
    "lu_linear",
    "affine_coupling",
    "affine_inject",
    "spline_coupling",
    "additive_shift",
    "dense_linear",
    "nlf_noise",
    "cube_root",
];

pub struct LayerCase {
    pub layer: Layer,
    pub dim: usize,
    pub theta_dim: usize,
    pub theta: Vec<f64>,
    pub z: Vec<f64>,
}

/// A randomized layer of kind `LAYER_KINDS[kind]` with a point to test at.
pub fn random_case(kind: usize, seed: u64) -> LayerCase {
    let mut rng = stream_rng(seed, 100 + kind as u64);
    let mut g = GaussianStream::seeded(seed, 200 + kind as u64);
    let dim = if (2..=4).contains(&kind) { rng.random_range(2..=4) } else { rng.random_range(1..=4) };
    let mut theta_dim = rng.random_range(1..=3);
    let layers = rng.random_range(1..=3);
    let use_theta = rng.random_bool(0.5);
    let mut nlf_dim = None;
    let mut layer = match kind {
        0 => Layer::ActNorm(ActNorm::identity(dim)),
        1 => Layer::LuLinear(LuLinear::identity_init(dim)),
        2 => Layer::AffineCoupling(AffineCoupling::new(dim, theta_dim, use_theta, 6, layers, &mut rng).unwrap()),
        3 => Layer::AffineInject(AffineInject::new(dim, theta_dim, 6, layers, &mut rng).unwrap()),
        4 => Layer::SplineCoupling(
            SplineCoupling::new(dim, theta_dim, use_theta, SplineConfig::default(), 6, layers, &mut rng).unwrap(),
        ),
        5 => Layer::AdditiveShift(AdditiveShift::new(Signal::Linear(g.matrix(dim, theta_dim)))),
        6 => {
            let l = Matrix::identity(dim).scale(2.0).add(&g.matrix(dim, dim).scale(0.4)).unwrap();
            Layer::DenseLinear(DenseLinear::new(l).unwrap())
        }
        7 => {
            let spec = EdgeSpec::new(rng.random_range(3..=6), 2, 1, vec![0.9], vec![0.1]).unwrap();
            nlf_dim = Some(spec.dim());
            Layer::NlfNoise(NlfNoise::new(spec, rng.random_range(0.1..0.6), rng.random_range(0.02..0.2)))
        }
        _ => Layer::CubeRoot(CubeRoot::new(rng.random_range(0.5..2.0))),
    };
    randomize_layer(&mut layer, 0.5, &mut rng);
    let (dim, theta) = match kind {
        7 => {
            theta_dim = 2;
            (nlf_dim.unwrap(), vec![rng.random_range(0.5..2.5), rng.random_range(0.7..3.0)])
        }
        8 => {
            theta_dim = 1;
            (dim, vec![rng.random_range(3.0..6.0)])
        }
        _ => (dim, g.vector(theta_dim)),
    };
    let z = if kind == 8 {
        // keep latents away from the generator's singular point
        (0..dim).map(|_| g.next()).map(|v: f64| v.signum() * (v.abs() + 0.2)).collect()
    } else {
        g.vector(dim).into_iter().map(|v| 1.5 * v).collect()
    };
    LayerCase { layer, dim, theta_dim, theta, z }
}

/// Worst coordinate error of `inverse(forward(z))` and `forward(inverse(z))`.
pub fn round_trip_error(case: &LayerCase) -> f64 {
    let l = &case.layer;
    let (y, _) = l.forward_at(&case.z, &case.theta).unwrap();
    let (back, _) = l.inverse_at(&y, &case.theta).unwrap();
    let mut err = max_diff(&back, &case.z);
    if !matches!(l, Layer::CubeRoot(_)) {
        let (x, _) = l.inverse_at(&case.z, &case.theta).unwrap();
        let (fwd, _) = l.forward_at(&x, &case.theta).unwrap();
        err = err.max(max_diff(&fwd, &case.z));
    }
    err
}

/// Analytic log-determinants of both directions against
/// `log|det|` of a central-difference Jacobian, relative to `max(1, |ld|)`.
pub fn logdet_error(case: &LayerCase) -> f64 {
    let l = &case.layer;
    let th = &case.theta;
    let (_, ld_f) = l.forward_at(&case.z, th).unwrap();
    let jf = fd_jacobian(|z| l.forward_at(z, th).unwrap().0, &case.z, FD_STEP);
    let mut err = rel(ld_f, LuFactor::new(&jf).unwrap().log_abs_det());
    let (y, _) = l.forward_at(&case.z, th).unwrap();
    let (_, ld_i) = l.inverse_at(&y, th).unwrap();
    let ji = fd_jacobian(|v| l.inverse_at(v, th).unwrap().0, &y, FD_STEP);
    err = err.max(rel(ld_i, LuFactor::new(&ji).unwrap().log_abs_det()));
    err
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Batch NLL gradient of a one-layer flow against central differences of
/// the scalar NLL path; norm-wise relative error per parameter matrix, maxed.
/// `None` for layers without weights.
pub fn gradcheck_error(case: &LayerCase, seed: u64) -> Option<f64> {
    if !case.layer.is_trainable() {
        return None;
    }
    let flow = ConditionalFlow::new(case.dim, case.theta_dim, vec![case.layer.clone()]).unwrap();
    let mut g = GaussianStream::seeded(seed, 300);
    let x = g.matrix(5, case.dim).scale(1.5);
    let th = g.matrix(5, case.theta_dim);
    let analytic = flow.nll_and_grad(&x, &th).unwrap().grads;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (p, ga) in analytic.iter().enumerate() {
        let n = ga.as_slice().len();
        let mut num = vec![0.0; n];
        for (j, slot) in num.iter_mut().enumerate() {
            let mut f = flow.clone();
            f.params_mut()[p].as_mut_slice()[j] += h;
            let up = f.nll(&x, &th).unwrap();
            f.params_mut()[p].as_mut_slice()[j] -= 2.0 * h;
            let down = f.nll(&x, &th).unwrap();
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = ga.as_slice().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    Some(worst)
}

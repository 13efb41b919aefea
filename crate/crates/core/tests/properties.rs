mod common;

use common::{random_case, LAYER_KINDS};
use gcrb::diff::{directional_derivatives, fd_jacobian, Dual, Real, FD_STEP};
use gcrb::flow::{linear_architecture, scale_architecture, ConditionalFlow};
use gcrb::layers::spline::{rq_apply, rq_knots};
use gcrb::linalg::{symmetric_eigenvalues, LuFactor, Matrix};
use gcrb::oracles::channel::{nlf_diag_gaussian_flow, sample_scale_y, scale_pdf, ChannelSpec};
use gcrb::oracles::edge::{edge_nlf_crb_matrix, EdgeSpec};
use gcrb::oracles::numeric_fim::{numeric_fim, FimMethod};
use gcrb::oracles::quadrature::{integrate, Rule};
use gcrb::oracles::theory::{theorem1_report, TheoryOptions};
use gcrb::rng::GaussianStream;
use gcrb::score::{egcrb, egfim, relative_error};
use gcrb::train::synthesize_dataset;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn ks_standard_normal(mut v: Vec<f64>) -> f64 {
    let phi = Normal::standard();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = phi.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn lift<const N: usize>(v: &[f64]) -> Vec<Dual<N>> {
    v.iter().map(|&x| Dual::cst(x)).collect()
}

/// Worst gap between forward-mode and differenced derivatives of
/// `(output, logdet)` along two directions, in `z` and then in θ.
fn dual_gap(kind: usize, seed: u64) -> f64 {
    let case = random_case(kind, seed);
    let l = &case.layer;
    let mut g = GaussianStream::seeded(seed, 900);
    let mut worst = 0.0f64;
    for inverse in [false, true] {
        let eval = |z: &[f64], th: &[f64]| -> Vec<f64> {
            let (mut y, ld) = if inverse { l.inverse_at(z, th).unwrap() } else { l.forward_at(z, th).unwrap() };
            y.push(ld);
            y
        };
        let z = if inverse { l.forward_at(&case.z, &case.theta).unwrap().0 } else { case.z.clone() };
        let th = case.theta.clone();
        let dirs = vec![g.vector(z.len()), g.vector(z.len())];
        let (_, jac) = directional_derivatives::<2>(
            |zd| {
                let (mut y, ld) = if inverse { l.inverse_at(zd, &lift(&th))? } else { l.forward_at(zd, &lift(&th))? };
                y.push(ld);
                Ok(y)
            },
            &z,
            &dirs,
        )
        .unwrap();
        let fd = fd_jacobian(|v| eval(v, &th), &z, FD_STEP);
        worst = worst.max(gap(&jac, &fd, &dirs));

        let dirs = vec![g.vector(th.len()), g.vector(th.len())];
        let (_, jac) = directional_derivatives::<2>(
            |td| {
                let (mut y, ld) = if inverse { l.inverse_at(&lift(&z), td)? } else { l.forward_at(&lift(&z), td)? };
                y.push(ld);
                Ok(y)
            },
            &th,
            &dirs,
        )
        .unwrap();
        let fd = fd_jacobian(|t| eval(&z, t), &th, FD_STEP);
        worst = worst.max(gap(&jac, &fd, &dirs));
    }
    worst
}

fn gap(jac: &Matrix, fd: &Matrix, dirs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (c, d) in dirs.iter().enumerate() {
        let num = fd.matvec(d).unwrap();
        for (r, v) in num.iter().enumerate() {
            worst = worst.max((jac[(r, c)] - v).abs() / v.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn every_layer_is_dual_liftable() {
    for (kind, name) in LAYER_KINDS.iter().enumerate() {
        for seed in 0..10 {
            let e = dual_gap(kind, seed);
            assert!(e <= 1e-6, "{name} seed {seed}: {e:.3e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splines_are_strictly_increasing(raw in prop::collection::vec(-3.0f64..3.0, 23)) {
        let knots = rq_knots(&raw, 8, 4.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let x = -5.0 + 10.0 * i as f64 / 2000.0;
            let (y, _) = rq_apply(&knots, x);
            let (y_eps, _) = rq_apply(&knots, x + 1e-6);
            prop_assert!(y_eps > y, "not increasing at {x}");
            prop_assert!(y > prev);
            prev = y;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn efim_is_symmetric_psd(seed in 0u64..1000, t0 in -2.0f64..2.0, t1 in -2.0f64..2.0) {
        let flows = [
            ChannelSpec::linear_seeded(5, 2, 0.7, seed).unwrap().optimal_flow().unwrap(),
            linear_architecture(3, 2).unwrap().randomized(0.4, seed),
        ];
        for flow in &flows {
            let f = egfim(flow, &[t0, t1], 2000, seed, None).unwrap().matrix;
            prop_assert_eq!(f.asymmetry(), 0.0);
            let eig = symmetric_eigenvalues(&f).unwrap();
            prop_assert!(eig[0] >= -1e-10 * eig[1]);
        }
    }
}

fn generated_range(flow: &ConditionalFlow, theta: &[f64]) -> (f64, f64) {
    let a = flow.generate(&[-9.0], theta).unwrap()[0];
    let b = flow.generate(&[9.0], theta).unwrap()[0];
    (a.min(b), a.max(b))
}

#[test]
fn one_dimensional_flows_integrate_to_one() {
    for seed in 0..4 {
        let flow = scale_architecture(1, 1, 16, 2, seed).unwrap().randomized(0.3, seed);
        for t in [3.0, 5.5] {
            let (lo, hi) = generated_range(&flow, &[t]);
            let mass = integrate(|x| flow.log_prob(&[x], &[t]).map(f64::exp), lo, hi, 3000).unwrap();
            assert!((mass - 1.0).abs() <= 2e-3, "seed {seed}, θ = {t}: mass {mass}");
        }
    }
}

#[test]
fn two_dimensional_flows_integrate_to_one() {
    for seed in 0..2 {
        let flow = linear_architecture(2, 1).unwrap().randomized(0.3, seed);
        let theta = [0.5];
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..72 {
            let a = i as f64 * std::f64::consts::TAU / 72.0;
            let g = flow.generate(&[8.0 * a.cos(), 8.0 * a.sin()], &theta).unwrap();
            for c in 0..2 {
                lo[c] = lo[c].min(g[c]);
                hi[c] = hi[c].max(g[c]);
            }
        }
        let rx = Rule::composite(lo[0], hi[0], 60, 8).unwrap();
        let ry = Rule::composite(lo[1], hi[1], 60, 8).unwrap();
        let mut mass = 0.0;
        for (&x, &wx) in rx.nodes.iter().zip(&rx.weights) {
            for (&y, &wy) in ry.nodes.iter().zip(&ry.weights) {
                mass += wx * wy * flow.log_prob(&[x, y], &theta).unwrap().exp();
            }
        }
        assert!((mass - 1.0).abs() <= 2e-3, "seed {seed}: mass {mass}");
    }
}

#[test]
fn linear_dataset_residuals_are_standard_normal() {
    let spec = ChannelSpec::linear_seeded(4, 2, 0.5, 11).unwrap();
    let ChannelSpec::LinearGaussian { a, l, .. } = &spec else { unreachable!() };
    let data = synthesize_dataset(&spec, 10_000, 3).unwrap();
    let lu = LuFactor::new(l).unwrap();
    let mut cols = vec![Vec::new(); 4];
    for i in 0..data.len() {
        let theta = data.theta.row(i);
        assert!(spec.theta_box().contains(theta));
        let mean = a.matvec(theta).unwrap();
        let resid: Vec<f64> = data.r.row(i).iter().zip(&mean).map(|(r, m)| r - m).collect();
        for (c, u) in lu.solve(&resid).unwrap().into_iter().enumerate() {
            cols[c].push(u);
        }
    }
    for (c, col) in cols.into_iter().enumerate() {
        let ks = ks_standard_normal(col);
        assert!(ks <= 0.02, "coordinate {c}: KS {ks}");
    }
}

#[test]
fn scale_dataset_matches_the_channel() {
    let spec = ChannelSpec::scale(1.0, 1);
    let data = synthesize_dataset(&spec, 10_000, 5).unwrap();
    let w: Vec<f64> = (0..data.len()).map(|i| (data.r[(i, 0)] / data.theta[(i, 0)]).powi(3)).collect();
    let ks = ks_standard_normal(w);
    assert!(ks <= 0.02, "KS {ks}");
}

#[test]
fn scale_sampler_matches_its_density() {
    let mut g = GaussianStream::seeded(8, 0);
    let mut y: Vec<f64> = (0..10_000).map(|_| sample_scale_y(1.0, &mut g)).collect();
    y.sort_by(f64::total_cmp);
    let (lo, n) = (-3.0, 600);
    let step = 6.0 / n as f64;
    let (mut cdf, mut ks, mut idx) = (0.0, 0.0f64, 0usize);
    for i in 1..=n {
        let x = lo + step * i as f64;
        cdf += integrate(|r| Ok(scale_pdf(r, 1.0, 1.0)), x - step, x, 4).unwrap();
        while idx < y.len() && y[idx] <= x {
            idx += 1;
        }
        ks = ks.max((cdf - idx as f64 / y.len() as f64).abs());
    }
    assert!((cdf - 1.0).abs() < 1e-9, "mass {cdf}");
    assert!(ks <= 0.02, "KS {ks}");
}

#[test]
fn optimal_flows_converge_in_m() {
    let linear = ChannelSpec::linear_seeded(8, 2, 1.0, 0).unwrap();
    let scale = ChannelSpec::scale(1.0, 1);
    let edge = EdgeSpec::new(8, 4, 1, vec![0.9], vec![0.1]).unwrap();
    let cases: Vec<(ConditionalFlow, Vec<f64>, Matrix)> = vec![
        (linear.optimal_flow().unwrap(), vec![0.2, 0.2], linear.crb(&[0.2, 0.2]).unwrap().bound),
        (scale.optimal_flow().unwrap(), vec![4.5], scale.crb(&[4.5]).unwrap().bound),
        (
            nlf_diag_gaussian_flow(edge.clone(), 0.2, 0.05).unwrap(),
            vec![3.5, 2.0],
            edge_nlf_crb_matrix(&edge, 0.2, 0.05, &[3.5, 2.0]).unwrap(),
        ),
    ];
    for (flow, theta, truth) in &cases {
        for (m, tol) in [(64_000, 0.02), (512_000, 0.01)] {
            let b = egcrb(&egfim(flow, theta, m, 1, None).unwrap()).unwrap();
            let re = relative_error(&b.matrix, truth).unwrap();
            assert!(re < tol, "θ = {theta:?}, m = {m}: RE {re}");
        }
    }
}

#[test]
fn optimal_scale_flow_closes_the_fim_gap() {
    let spec = ChannelSpec::scale(1.0, 1);
    let flow = spec.optimal_flow().unwrap();
    for t in [3.0, 6.0] {
        let fim = numeric_fim(&spec, &[t], FimMethod::QUADRATURE).unwrap();
        let r = theorem1_report(&spec, &fim, &flow, &[t], None, TheoryOptions::default()).unwrap();
        assert!(r.eta <= 1e-6 && r.fim_gap <= 1e-3, "θ = {t}: η {} gap {}", r.eta, r.fim_gap);
        assert!((0.0..=1.0).contains(&r.tv) && r.fisher_rel_info >= 0.0);
    }
}

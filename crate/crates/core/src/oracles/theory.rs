//! One-dimensional evaluation of the learning-error bound on the Fisher
//! information of a flow.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::linalg::{condition_number_spd, inverse_spd, spectral_norm_sym, symmetric_eigenvalues, Matrix};
use crate::score::{ScoreEvaluator, TrustedRegion};

use super::numeric_fim::StatModel;
use super::quadrature::Rule;

/// Latent quantile used to find where the flow puts its mass.
const FLOW_TAIL_Z: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryReport {
    pub theta: Vec<f64>,
    pub tv: f64,
    pub fisher_rel_info: f64,
    /// Grid maximum of the true score norm, standing in for `C_R`.
    pub c_r: f64,
    /// Largest flow score norm over the trusted grid nodes.
    pub c_s: f64,
    pub eta: f64,
    /// `‖F_R − F̂_G‖₂`, both by quadrature.
    pub fim_gap: f64,
    pub fim_true: Matrix,
    pub fim_flow: Matrix,
    pub kappa: f64,
    pub lambda_min: f64,
    /// `‖F̂_G⁻¹‖ ≤ (λ_min − η)⁻¹` when `η < λ_min`.
    pub inv_norm_bound: Option<f64>,
    /// `‖F_R⁻¹‖ (λ_min − η)⁻¹ η` bounding the bound error.
    pub crb_error_bound: Option<f64>,
    pub holds: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TheoryOptions {
    pub panels: usize,
    pub order: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self { panels: 3000, order: 8 }
    }
}

/// Quadrature evaluation of TV, Fisher relative information and η at θ.
/// The flow density is zeroed outside `region` without renormalization.
pub fn theorem1_report(
    truth: &dyn StatModel,
    fim_true: &Matrix,
    flow: &ConditionalFlow,
    theta: &[f64],
    region: Option<&TrustedRegion>,
    opts: TheoryOptions,
) -> Result<TheoryReport> {
    if truth.dim() != 1 || flow.dim() != 1 {
        return Err(Error::UnsupportedDimension { found: truth.dim().max(flow.dim()), reason: "bound is evaluated by 1-D quadrature" });
    }
    let k = theta.len();
    let (center, half) = truth.window(theta)?;
    let mut lo = center[0] - half;
    let mut hi = center[0] + half;
    for z in [-FLOW_TAIL_Z, FLOW_TAIL_Z] {
        let g = flow.generate(&[z], theta)?[0];
        lo = lo.min(g);
        hi = hi.max(g);
    }
    if let Some(r) = region {
        lo = lo.min(r.center[0] - r.radius);
        hi = hi.max(r.center[0] + r.radius);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::QuadratureFailure("integration range is unbounded".into()));
    }
    let rule = Rule::composite(lo, hi, opts.panels, opts.order)?;
    let eval = ScoreEvaluator::new(flow, theta)?;
    let (mut tv, mut i_f, mut c_r, mut c_s) = (0.0, 0.0, 0.0f64, 0.0f64);
    let mut fim_flow = Matrix::zeros(k, k);
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let r = [x];
        let lp_r = truth.log_density(&r, theta)?;
        let p_r = lp_r.exp();
        let s_r = if p_r > 0.0 { truth.score(&r, theta)? } else { vec![0.0; k] };
        c_r = c_r.max(norm(&s_r));
        let trusted = region.is_none_or(|reg| reg.contains(&r));
        let (p_g, s_g) = if trusted {
            let (lp, s) = eval.log_prob_grad(&r)?;
            (lp.exp(), s)
        } else {
            (0.0, vec![0.0; k])
        };
        tv += w * (p_g - p_r).abs();
        if p_g > 0.0 {
            c_s = c_s.max(norm(&s_g));
            let diff: Vec<f64> = s_g.iter().zip(&s_r).map(|(a, b)| a - b).collect();
            i_f += w * p_g * norm(&diff).powi(2);
            for i in 0..k {
                for j in 0..k {
                    fim_flow[(i, j)] += w * p_g * s_g[i] * s_g[j];
                }
            }
        }
    }
    tv *= 0.5;
    if !(tv.is_finite() && i_f.is_finite() && fim_flow.is_finite()) {
        return Err(Error::QuadratureFailure("non-finite integrand".into()));
    }
    // rounding can push either slightly outside its range
    let tv = tv.clamp(0.0, 1.0);
    let i_f = i_f.max(0.0);
    let flow_norm = spectral_norm_sym(&fim_flow)?;
    let eta = 2.0 * c_r * c_r * tv + 2.0 * (flow_norm * i_f).sqrt() + i_f;
    let fim_gap = spectral_norm_sym(&fim_true.sub(&fim_flow)?.symmetrized())?;
    let lambda_min = symmetric_eigenvalues(fim_true)?[0];
    let kappa = condition_number_spd(fim_true)?;
    let (inv_norm_bound, crb_error_bound) = if eta < lambda_min {
        let b = 1.0 / (lambda_min - eta);
        let crb_norm = spectral_norm_sym(&inverse_spd(fim_true)?)?;
        (Some(b), Some(crb_norm * b * eta))
    } else {
        (None, None)
    };
    Ok(TheoryReport {
        theta: theta.to_vec(),
        tv,
        fisher_rel_info: i_f,
        c_r,
        c_s,
        eta,
        // quadrature noise on both sides is far below this slack
        holds: fim_gap <= eta + 1e-9 * spectral_norm_sym(fim_true)?,
        fim_gap,
        fim_true: fim_true.clone(),
        fim_flow,
        kappa,
        lambda_min,
        inv_norm_bound,
        crb_error_bound,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

//! Vertical edge images and their Gaussian-noise Cramér–Rao bounds.
//!
//! Pixels are indexed `(i, j, ch)` with `i ∈ [0, h)` the horizontal position
//! the edge moves along, `j ∈ [0, w)` the rows and `ch ∈ [0, c)` the color
//! channel; the flat index is `(i·w + j)·c + ch`.

use serde::{Deserialize, Serialize};

use crate::diff::Real;
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p_high: Vec<f64>,
    pub p_low: Vec<f64>,
}

impl EdgeSpec {
    pub fn new(h: usize, w: usize, c: usize, p_high: Vec<f64>, p_low: Vec<f64>) -> Result<Self> {
        let spec = Self { h, w, c, p_high, p_low };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w == 0 || self.c == 0 {
            return Err(Error::InvalidArgument(format!(
                "edge image {}x{}x{} needs h >= 2 and w, c >= 1",
                self.h, self.w, self.c
            )));
        }
        if self.p_high.len() != self.c || self.p_low.len() != self.c {
            return Err(Error::ShapeMismatch("edge intensities need one value per channel".into()));
        }
        if self.p_high.iter().chain(&self.p_low).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("edge intensities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.h * self.w * self.c
    }

    fn contrast_sq(&self) -> f64 {
        self.p_high.iter().zip(&self.p_low).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

/// `φ(x) = 1 / (1 + eˣ)`.
pub fn edge_sigmoid<T: Real>(x: T) -> T {
    (-x).sigmoid()
}

fn edge_theta<T: Real>(theta: &[T]) -> Result<(T, T)> {
    match theta {
        [p, w] if w.re() > 0.0 => Ok((*p, *w)),
        [_, w] => Err(Error::DomainError(format!("edge width must be positive, got {}", w.re()))),
        _ => Err(Error::ShapeMismatch("edge parameters are (position, width)".into())),
    }
}

/// Column profile `s_i(θ) = φ((θ_p − i)/θ_w)`.
pub fn edge_profile<T: Real>(h: usize, theta: &[T]) -> Result<Vec<T>> {
    let (p, w) = edge_theta(theta)?;
    Ok((0..h).map(|i| edge_sigmoid((p - i as f64) / w)).collect())
}

/// Clean image `f_ijc = (pʰ_c − pˡ_c) s_i + pˡ_c`, flattened.
pub fn edge_image<T: Real>(spec: &EdgeSpec, theta: &[T]) -> Result<Vec<T>> {
    let s = edge_profile(spec.h, theta)?;
    let mut out = Vec::with_capacity(spec.dim());
    for si in &s {
        for _ in 0..spec.w {
            for ch in 0..spec.c {
                out.push(*si * (spec.p_high[ch] - spec.p_low[ch]) + spec.p_low[ch]);
            }
        }
    }
    Ok(out)
}

/// `M_i = s_i²(1 − s_i)² [[1, −u], [−u, u²]]` with `u = (θ_p − i)/θ_w`.
fn m_terms(h: usize, theta: &[f64]) -> Result<Vec<([f64; 3], f64)>> {
    let (p, w) = edge_theta(theta)?;
    Ok((0..h)
        .map(|i| {
            let u = (p - i as f64) / w;
            let s = edge_sigmoid(u);
            let g = (s * (1.0 - s)).powi(2);
            ([g, -g * u, g * u * u], s)
        })
        .collect())
}

fn sym2(a: f64, b: f64, c: f64) -> Matrix {
    Matrix::from_rows(&[&[a, b], &[b, c]]).expect("finite 2x2")
}

fn invert_information(fim: &Matrix) -> Result<Matrix> {
    let scale = fim.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det = fim[(0, 0)] * fim[(1, 1)] - fim[(0, 1)] * fim[(1, 0)];
    if !(scale > 0.0) || !(det > 1e-14 * scale * scale) {
        return Err(Error::SingularInformation(format!("edge FIM determinant {det:.3e}")));
    }
    inverse_spd(fim).map_err(|e| Error::SingularInformation(e.to_string()))
}

/// Fisher information under white Gaussian noise of variance `σ²`.
pub fn edge_wgn_fim(spec: &EdgeSpec, sigma: f64, theta: &[f64]) -> Result<Matrix> {
    spec.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::DegenerateNoise(format!("σ = {sigma}")));
    }
    let tw = theta.get(1).copied().unwrap_or(f64::NAN);
    let mut acc = [0.0; 3];
    for (m, _) in m_terms(spec.h, theta)? {
        for k in 0..3 {
            acc[k] += m[k];
        }
    }
    let f = spec.w as f64 * spec.contrast_sq() / (sigma * sigma * tw * tw);
    Ok(sym2(f * acc[0], f * acc[1], f * acc[2]))
}

/// Fisher information under noise level function noise with per-pixel
/// variance `C = α² f + δ²`: the mean term plus the variance term,
/// `Σ Δ_c² M_i / (θ_w² C) · (1 + α⁴ / (2C))`.
pub fn edge_nlf_fim(spec: &EdgeSpec, alpha: f64, delta: f64, theta: &[f64]) -> Result<Matrix> {
    spec.validate()?;
    let tw = theta.get(1).copied().unwrap_or(f64::NAN);
    let a2 = alpha * alpha;
    let mut acc = [0.0; 3];
    for (m, s) in m_terms(spec.h, theta)? {
        for ch in 0..spec.c {
            let dp = spec.p_high[ch] - spec.p_low[ch];
            let f = dp * s + spec.p_low[ch];
            let cv = a2 * f + delta * delta;
            if !(cv > 0.0) {
                return Err(Error::DegenerateNoise(format!("variance {cv} at column with s = {s}")));
            }
            let weight = spec.w as f64 * dp * dp / (tw * tw * cv) * (1.0 + a2 * a2 / (2.0 * cv));
            for k in 0..3 {
                acc[k] += weight * m[k];
            }
        }
    }
    Ok(sym2(acc[0], acc[1], acc[2]))
}

pub fn edge_wgn_crb_matrix(spec: &EdgeSpec, sigma: f64, theta: &[f64]) -> Result<Matrix> {
    invert_information(&edge_wgn_fim(spec, sigma, theta)?)
}

pub fn edge_nlf_crb_matrix(spec: &EdgeSpec, alpha: f64, delta: f64, theta: &[f64]) -> Result<Matrix> {
    invert_information(&edge_nlf_fim(spec, alpha, delta, theta)?)
}

/// `ρ = C₁₂ / √(C₁₁ C₂₂)`.
pub fn pearson(bound: &Matrix) -> f64 {
    bound[(0, 1)] / (bound[(0, 0)] * bound[(1, 1)]).sqrt()
}

/// Position θ_p mirrored about the image center.
pub fn mirror_position(spec: &EdgeSpec, theta_p: f64) -> f64 {
    (spec.h - 1) as f64 - theta_p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EdgeSpec {
        EdgeSpec::new(8, 4, 1, vec![0.8], vec![0.2]).unwrap()
    }

    #[test]
    fn profile_is_half_at_the_edge() {
        let s = edge_profile(8, &[3.0, 2.0]).unwrap();
        assert_eq!(s[3], 0.5);
        assert!(s[0] < 0.5 && s[7] > 0.5);
    }

    #[test]
    fn flat_image_without_contrast() {
        let flat = EdgeSpec::new(6, 2, 2, vec![0.4, 0.1], vec![0.4, 0.1]).unwrap();
        let img = edge_image(&flat, &[2.5, 1.0]).unwrap();
        for (k, v) in img.iter().enumerate() {
            assert_eq!(*v, [0.4, 0.1][k % 2]);
        }
        assert!(matches!(edge_wgn_crb_matrix(&flat, 0.1, &[2.5, 1.0]), Err(Error::SingularInformation(_))));
    }

    #[test]
    fn sharp_edge_approximates_a_step() {
        let sp = spec();
        let tw = 0.05;
        let img = edge_image(&sp, &[3.3, tw]).unwrap();
        // nearest column is 0.3 away from the edge
        let bound = edge_sigmoid(0.3 / tw) * 0.6;
        for i in 0..sp.h {
            let step = if (i as f64) > 3.3 { 0.8 } else { 0.2 };
            for j in 0..sp.w {
                assert!((img[i * sp.w + j] - step).abs() <= bound + 1e-15);
            }
        }
    }

    #[test]
    fn nlf_reduces_to_wgn() {
        let sp = spec();
        for &t in &[[1.0, 0.7], [3.5, 2.0], [6.2, 4.0]] {
            let a = edge_nlf_crb_matrix(&sp, 0.0, 0.05, &t).unwrap();
            let b = edge_wgn_crb_matrix(&sp, 0.05, &t).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12 * b.frobenius_norm());
        }
    }

    #[test]
    fn wgn_is_mirror_symmetric() {
        let sp = EdgeSpec::new(32, 4, 1, vec![0.9], vec![0.1]).unwrap();
        for &p in &[0.0, 4.3, 10.0, 15.5] {
            let a = edge_wgn_crb_matrix(&sp, 0.1, &[p, 8.0]).unwrap();
            let b = edge_wgn_crb_matrix(&sp, 0.1, &[mirror_position(&sp, p), 8.0]).unwrap();
            assert!((a[(0, 0)] - b[(0, 0)]).abs() <= 1e-9 * a[(0, 0)]);
        }
    }
}

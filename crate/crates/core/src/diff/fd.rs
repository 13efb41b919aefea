use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::dual::Dual;
use super::real::Real;

/// Default relative step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[inline]
fn step(h: f64, x: f64) -> f64 {
    h * x.abs().max(1.0)
}

/// Central-difference Jacobian of `f` at `x`; the step for coordinate `j` is
/// `h * max(1, |x_j|)`.
pub fn fd_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Matrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let hj = step(h, x[j]);
        xp[j] = x[j] + hj;
        let fp = f(&xp);
        xp[j] = x[j] - hj;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * hj)).collect());
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Matrix::from_fn(rows, x.len(), |r, c| cols[c][r])
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let hj = step(h, x[j]);
            xp[j] = x[j] + hj;
            let fp = f(&xp);
            xp[j] = x[j] - hj;
            let fm = f(&xp);
            xp[j] = x[j];
            (fp - fm) / (2.0 * hj)
        })
        .collect()
}

/// Evaluate `f` at `x` and its derivatives along `N` directions in one
/// forward pass. The returned matrix holds one column per direction.
pub fn directional_derivatives<const N: usize>(
    f: impl Fn(&[Dual<N>]) -> Result<Vec<Dual<N>>>,
    x: &[f64],
    directions: &[Vec<f64>],
) -> Result<(Vec<f64>, Matrix)> {
    if directions.len() != N || directions.iter().any(|d| d.len() != x.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} directions of length {} for {N} slots",
            directions.len(),
            x.len()
        )));
    }
    let seeded: Vec<Dual<N>> = (0..x.len())
        .map(|i| {
            let mut eps = [0.0; N];
            for (k, d) in directions.iter().enumerate() {
                eps[k] = d[i];
            }
            Dual::with_tangent(x[i], eps)
        })
        .collect();
    let out = f(&seeded)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainError("non-finite value or derivative".into()));
    }
    let values = out.iter().map(|v| v.re).collect();
    let jac = Matrix::from_fn(out.len(), N, |r, c| out[r].eps[c]);
    Ok((values, jac))
}

/// `ln` that reports a non-positive argument instead of producing NaN.
pub fn checked_ln<T: Real>(x: T) -> Result<T> {
    if x.re() <= 0.0 || !x.re().is_finite() {
        return Err(Error::DomainError(format!("log of {}", x.re())));
    }
    Ok(x.ln())
}

/// `sqrt` that reports a negative argument; the derivative at zero is not
/// defined either, so zero is rejected too.
pub fn checked_sqrt<T: Real>(x: T) -> Result<T> {
    if x.re() <= 0.0 || !x.re().is_finite() {
        return Err(Error::DomainError(format!("sqrt of {}", x.re())));
    }
    Ok(x.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let (v, j) =
            directional_derivatives::<1>(|x| Ok(vec![x[0] * x[0]]), &[3.0], &[vec![1.0]]).unwrap();
        assert_eq!(v, vec![9.0]);
        assert_eq!(j[(0, 0)], 6.0);
    }

    #[test]
    fn exp_times_linear_gradient() {
        let dirs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (_, j) =
            directional_derivatives::<2>(|x| Ok(vec![x[0].exp() * x[1]]), &[0.0, 2.0], &dirs)
                .unwrap();
        assert_eq!(j.row(0), &[2.0, 1.0]);
    }

    #[test]
    fn domain_errors_surface() {
        let r = directional_derivatives::<1>(
            |x| Ok(vec![checked_ln(x[0])?]),
            &[-1.0],
            &[vec![1.0]],
        );
        assert!(matches!(r, Err(Error::DomainError(_))));
        let r = directional_derivatives::<1>(|x| Ok(vec![x[0].sqrt()]), &[-1.0], &[vec![1.0]]);
        assert!(matches!(r, Err(Error::DomainError(_))));
    }

    #[test]
    fn fd_jacobian_examples() {
        let j = fd_jacobian(|x| x.to_vec(), &[0.3, -1.0, 2.0], FD_STEP);
        assert!(j.max_abs_diff(&Matrix::identity(3)) < 1e-9);
        let j = fd_jacobian(|x| vec![2.0 * x[0]], &[5.0], FD_STEP);
        assert!((j[(0, 0)] - 2.0).abs() < 1e-9);

        let a = Matrix::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 4.0]]).unwrap();
        let b = [0.1, -0.2];
        let f = |x: &[f64]| {
            let mut y = a.matvec(x).unwrap();
            y.iter_mut().zip(&b).for_each(|(v, c)| *v += c);
            y
        };
        let j = fd_jacobian(f, &[1.0, 2.0, -3.0], FD_STEP);
        assert!(j.max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn smooth_function_matches_fd() {
        let f = |x: &[Dual<3>]| -> Result<Vec<Dual<3>>> {
            Ok(vec![
                (x[0] * x[1]).silu() + checked_sqrt(x[2] * x[2] + 1.0)?,
                checked_ln(x[0].exp() + x[1].square())? * x[2].tanh(),
            ])
        };
        let x = [0.4, -1.3, 2.2];
        let dirs: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let (_, j) = directional_derivatives::<3>(f, &x, &dirs).unwrap();
        let plain = |x: &[f64]| {
            vec![
                (x[0] * x[1]).silu() + (x[2] * x[2] + 1.0).sqrt(),
                (x[0].exp() + x[1] * x[1]).ln() * x[2].tanh(),
            ]
        };
        let fd = fd_jacobian(plain, &x, FD_STEP);
        for r in 0..2 {
            for c in 0..3 {
                let rel = (j[(r, c)] - fd[(r, c)]).abs() / j[(r, c)].abs().max(1e-8);
                assert!(rel < 1e-6, "{r},{c}: {} vs {}", j[(r, c)], fd[(r, c)]);
            }
        }
    }
}

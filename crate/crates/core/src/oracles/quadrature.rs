//! Composite Gauss–Legendre quadrature.

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "rule needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi's initial guess, then Newton on P_n
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        dp = if d.is_finite() { d } else { dp };
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre(n: usize, t: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, t);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (t * p - p0) / (t * t - 1.0);
    (p, d)
}

/// Quadrature nodes and weights for `panels` equal panels of `[a, b]`.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn composite(a: f64, b: f64, panels: usize, order: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && b > a) || panels == 0 {
            return Err(Error::QuadratureFailure(format!("bad interval [{a}, {b}] with {panels} panels")));
        }
        let (x, w) = gauss_legendre(order);
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let mid = a + (p as f64 + 0.5) * h;
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push(mid + 0.5 * h * xi);
                weights.push(0.5 * h * wi);
            }
        }
        Ok(Self { nodes, weights })
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(*x)?;
            if !v.is_finite() {
                return Err(Error::QuadratureFailure(format!("integrand is {v} at {x}")));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// `∫_a^b f` with a composite 10-point rule.
pub fn integrate(f: impl FnMut(f64) -> Result<f64>, a: f64, b: f64, panels: usize) -> Result<f64> {
    Rule::composite(a, b, panels, 10)?.integrate(f)
}

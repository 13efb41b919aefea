//! Batched reverse-mode differentiation over matrices.
//!
//! Rows are batch items. Every node owns its forward value; `backward`
//! replays the record in reverse and accumulates adjoints. A tape is built
//! fresh for every mini-batch.

use crate::error::{Error, Result};
use crate::layers::spline::{rq_apply, rq_knots};
use crate::linalg::{LuFactor, Matrix};

use super::dual::Dual;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Recip(Var),
    LogAbs(Var),
    Square(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    LuCompose(Var, Var, Var),
    Inverse(Var),
    RqSpline { x: Var, raw: Var, bins: usize, bound: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default, Debug)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of the given shape when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

pub(crate) fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(k, k2, "inner dimensions differ");
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose lengths match the dimensions checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_slice().as_ptr(),
            rsa,
            csa,
            b.as_slice().as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_slice().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec_unchecked(a.rows(), a.cols(), a.as_slice().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    Matrix::from_vec_unchecked(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn row_broadcast(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    let r = row.as_slice();
    for i in 0..a.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(r) {
            *v = f(*v, b);
        }
    }
    out
}

fn column_sums(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, a.cols());
    for i in 0..a.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

/// Reversal permutation applied to the rows of `m`.
pub(crate) fn reverse_rows(m: &Matrix) -> Matrix {
    let n = m.rows();
    Matrix::from_fn(n, m.cols(), |r, c| m[(n - 1 - r, c)])
}

/// `P L (U + diag(exp s))` with `P` the reversal permutation, `L` the unit
/// lower part of `lower` and `U` the strict upper part of `upper`.
pub(crate) fn lu_compose(lower: &Matrix, upper: &Matrix, log_scale: &[f64]) -> Matrix {
    let d = log_scale.len();
    let l = Matrix::from_fn(d, d, |r, c| match r.cmp(&c) {
        std::cmp::Ordering::Greater => lower[(r, c)],
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => 0.0,
    });
    let v = Matrix::from_fn(d, d, |r, c| match r.cmp(&c) {
        std::cmp::Ordering::Less => upper[(r, c)],
        std::cmp::Ordering::Equal => log_scale[r].exp(),
        std::cmp::Ordering::Greater => 0.0,
    });
    reverse_rows(&gemm(&l, false, &v, false))
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    /// Record a leaf (weight or constant input).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), false);
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), true);
        self.push(Op::MatMulT(a, b), v)
    }

    /// Add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x + y);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x * y);
        self.push(Op::MulRow(a, row), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * super::real::sigmoid(x));
        self.push(Op::Silu(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn log_abs(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.abs().ln());
        self.push(Op::LogAbs(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows(), width, |r, c| src[(r, start + c)]);
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            assert_eq!(src.rows(), rows, "concatenating different batch sizes");
            for r in 0..rows {
                v.row_mut(r)[off..off + w].copy_from_slice(src.row(r));
            }
            off += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows(), 1, |r, _| src.row(r).iter().sum());
        self.push(Op::SumRows(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Op::SumAll(a), Matrix::from_vec_unchecked(1, 1, vec![s]))
    }

    /// Build the LU-parameterized weight `P L (U + diag(exp s))`.
    pub fn lu_compose(&mut self, lower: Var, upper: Var, log_scale: Var) -> Var {
        let v = lu_compose(self.value(lower), self.value(upper), self.value(log_scale).as_slice());
        self.push(Op::LuCompose(lower, upper, log_scale), v)
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let inv = LuFactor::new(self.value(a))?.inverse()?;
        Ok(self.push(Op::Inverse(a), inv))
    }

    /// Rational-quadratic spline in the normalizing direction, applied
    /// elementwise to `x` (`n × a`) with knot parameters `raw`
    /// (`n × a(3K − 1)`). The result is `n × 2a`: transformed values, then
    /// log-derivatives.
    pub fn rq_spline(&mut self, x: Var, raw: Var, bins: usize, bound: f64) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(raw);
        let a = xv.cols();
        let per = 3 * bins - 1;
        if rv.cols() != a * per || rv.rows() != xv.rows() {
            return Err(Error::ShapeMismatch("spline parameters".into()));
        }
        let mut out = Matrix::zeros(xv.rows(), 2 * a);
        for r in 0..xv.rows() {
            for j in 0..a {
                let knots = rq_knots::<f64>(&rv.row(r)[j * per..(j + 1) * per], bins, bound)?;
                let (y, ld) = rq_apply(&knots, xv[(r, j)]);
                out[(r, j)] = y;
                out[(r, a + j)] = ld;
            }
        }
        Ok(self.push(Op::RqSpline { x, raw, bins, bound }, out))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch("loss must be a 1x1 value".into()));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::NonFiniteLoss(lv[(0, 0)]));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, gemm(g, false, self.value(*b), true));
                acc(*b, gemm(self.value(*a), true, g, false));
            }
            Op::MatMulT(a, b) => {
                acc(*a, gemm(g, false, self.value(*b), false));
                acc(*b, gemm(g, true, self.value(*a), false));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                acc(*a, row_broadcast(g, rv, |x, y| x * y));
                acc(*row, column_sums(&zip(g, av, |x, y| x * y)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, self.value(*b), |x, y| x * y));
                acc(*b, zip(g, self.value(*a), |x, y| x * y));
            }
            Op::Neg(a) => acc(*a, map(g, |x| -x)),
            Op::Scale(a, s) => acc(*a, map(g, |x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, zip(g, out, |x, y| x * y)),
            Op::Silu(a) => {
                // recover σ(x) = silu(x)/x from the forward value
                let xs = self.value(*a).as_slice();
                let d = out
                    .as_slice()
                    .iter()
                    .zip(xs)
                    .zip(g.as_slice())
                    .map(|((&y, &x), &gx)| {
                        let s = if x.abs() > 1e-3 { y / x } else { super::real::sigmoid(x) };
                        gx * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                acc(*a, Matrix::from_vec_unchecked(g.rows(), g.cols(), d))
            }
            Op::Recip(a) => acc(*a, zip(g, out, |x, y| -x * y * y)),
            Op::LogAbs(a) => acc(*a, zip(g, self.value(*a), |x, y| x / y)),
            Op::Square(a) => acc(*a, zip(g, self.value(*a), |x, y| 2.0 * x * y)),
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, Matrix::from_fn(g.rows(), w, |r, c| g[(r, off + c)]));
                    off += w;
                }
            }
            Op::SumRows(a) => {
                let src = self.value(*a);
                acc(*a, Matrix::from_fn(src.rows(), src.cols(), |r, _| g[(r, 0)]));
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                acc(*a, Matrix::filled(src.rows(), src.cols(), g[(0, 0)]));
            }
            Op::LuCompose(lower, upper, log_scale) => {
                let s = self.value(*log_scale).as_slice();
                let d = s.len();
                let lu = self.value(*lower);
                let uu = self.value(*upper);
                let l = Matrix::from_fn(d, d, |r, c| {
                    if r > c {
                        lu[(r, c)]
                    } else if r == c {
                        1.0
                    } else {
                        0.0
                    }
                });
                let v = Matrix::from_fn(d, d, |r, c| {
                    if r < c {
                        uu[(r, c)]
                    } else if r == c {
                        s[r].exp()
                    } else {
                        0.0
                    }
                });
                // W = P M with P the reversal, so dM = P dW.
                let gm = reverse_rows(g);
                let gl = gemm(&gm, false, &v, true);
                let gv = gemm(&l, true, &gm, false);
                acc(*lower, Matrix::from_fn(d, d, |r, c| if r > c { gl[(r, c)] } else { 0.0 }));
                acc(*upper, Matrix::from_fn(d, d, |r, c| if r < c { gv[(r, c)] } else { 0.0 }));
                acc(*log_scale, Matrix::from_fn(1, d, |_, c| gv[(c, c)] * s[c].exp()));
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = −A⁻¹ dA A⁻¹, so Ḡ_A = −A⁻ᵀ Ḡ A⁻ᵀ.
                let t = gemm(out, true, g, false);
                acc(*a, map(&gemm(&t, false, out, true), |x| -x));
            }
            Op::RqSpline { x, raw, bins, bound } => {
                let (gx, graw) = self.rq_backward(*x, *raw, *bins, *bound, g)?;
                acc(*x, gx);
                acc(*raw, graw);
            }
        }
        Ok(())
    }

    fn rq_backward(
        &self,
        x: Var,
        raw: Var,
        bins: usize,
        bound: f64,
        g: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        const CHUNK: usize = 8;
        let xv = self.value(x);
        let rv = self.value(raw);
        let a = xv.cols();
        let per = 3 * bins - 1;
        let mut gx = Matrix::zeros(xv.rows(), a);
        let mut graw = Matrix::zeros(rv.rows(), rv.cols());
        let mut inputs = vec![0.0; per + 1];
        let mut duals = vec![Dual::<CHUNK>::constant(0.0); per + 1];
        for r in 0..xv.rows() {
            for j in 0..a {
                let gy = g[(r, j)];
                let gl = g[(r, a + j)];
                if gy == 0.0 && gl == 0.0 {
                    continue;
                }
                inputs[0] = xv[(r, j)];
                inputs[1..].copy_from_slice(&rv.row(r)[j * per..(j + 1) * per]);
                for start in (0..inputs.len()).step_by(CHUNK) {
                    for (i, d) in duals.iter_mut().enumerate() {
                        *d = if i >= start && i < start + CHUNK {
                            Dual::variable(inputs[i], i - start)
                        } else {
                            Dual::constant(inputs[i])
                        };
                    }
                    let knots = rq_knots(&duals[1..], bins, bound)?;
                    let (y, ld) = rq_apply(&knots, duals[0]);
                    for i in start..(start + CHUNK).min(inputs.len()) {
                        let d = gy * y.eps[i - start] + gl * ld.eps[i - start];
                        if i == 0 {
                            gx[(r, j)] += d;
                        } else {
                            graw[(r, j * per + i - 1)] += d;
                        }
                    }
                }
            }
        }
        Ok((gx, graw))
    }
}

//! Analytic value-function stubs `f(x) = ½ xᵀA x + bᵀx + c` with closed-form
//! convexity violations.

use convexq::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Quadratic {
    /// Symmetric, row-major `n × n`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `scale · I` quadratic part, no linear part.
    pub fn isotropic(n: usize, scale: f64) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = scale;
        }
        Quadratic { a, b: vec![0.0; n], c: 0.0 }
    }

    pub fn affine(b: Vec<f64>, c: f64) -> Self {
        let n = b.len();
        Quadratic { a: vec![0.0; n * n], b, c }
    }

    fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += x[i] * self.a[i * n + j] * y[j];
            }
        }
        s
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        0.5 * self.form(x, x) + self.b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>() + self.c
    }

    /// `f(t u + (1-t) v) - t f(u) - (1-t) f(v) = -½ t(1-t) (u-v)ᵀA(u-v)`.
    pub fn point_violation(&self, u: &[f64], v: &[f64], t: f64) -> f64 {
        let d: Vec<f64> = u.iter().zip(v).map(|(u, v)| u - v).collect();
        -0.5 * t * (1.0 - t) * self.form(&d, &d)
    }

    /// `f(u) + ∇f(u)·(v-u) - f(v) = -½ (v-u)ᵀA(v-u)`.
    pub fn grad_violation(&self, u: &[f64], v: &[f64]) -> f64 {
        let d: Vec<f64> = u.iter().zip(v).map(|(u, v)| v - u).collect();
        -0.5 * self.form(&d, &d)
    }

    pub fn curvature(&self, x: &[f64]) -> f64 {
        self.form(x, x)
    }

    /// Row-wise value on a tape.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let n = self.dim();
        let a = tape.constant(Tensor::from_vec(n, n, self.a.clone()));
        let b = tape.constant(Tensor::column(&self.b));
        let c = tape.constant(Tensor::scalar(self.c));
        let ax = tape.matmul(x, a, false, false)?;
        let xax = tape.mul(x, ax)?;
        let quad = tape.sum_cols(xax)?;
        let quad = tape.scale(quad, 0.5)?;
        let lin = tape.matmul(x, b, false, false)?;
        let f = tape.add(quad, lin)?;
        tape.add_row(f, c)
    }
}

pub fn mean_sq_pos(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>() / v.len() as f64
}

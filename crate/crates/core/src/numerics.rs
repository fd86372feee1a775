//! Dense row-major matrices, activations, and a finite-difference gradient
//! verifier.
//!
//! Every layer in the crate ships a hand-written backward pass. The
//! [`grad_check`] function compares such a backward pass against central
//! differences of a randomly weighted sum of the forward output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) even in saturation.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Hyperbolic tangent, kept strictly inside (-1, 1).
#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh().clamp(-ONE_MINUS, ONE_MINUS)
}

/// A dense matrix of doubles in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::input(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copy of column `c`.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: impl IntoIterator<Item = usize>) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for i in idx {
            data.extend_from_slice(self.row(i));
            rows += 1;
        }
        Matrix {
            rows,
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Dimension {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Places `b` to the right of `a`.
    pub fn hstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows != b.rows {
            return Err(Error::Dimension {
                op: "hstack",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Matrix {
            rows: a.rows,
            cols: a.cols + b.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Standard matrix product.
pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "mat_mul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Entry-wise operations over equally shaped operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Hadamard,
    Add,
    Sub,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
            _ => 2,
        }
    }
}

pub fn elementwise(kind: Elementwise, args: &[&Matrix]) -> Result<Matrix> {
    if args.len() != kind.arity() {
        return Err(Error::input(format!(
            "{kind:?} takes {} operand(s), got {}",
            kind.arity(),
            args.len()
        )));
    }
    let a = args[0];
    match kind {
        Elementwise::Sigmoid => Ok(a.map(sigmoid)),
        Elementwise::Tanh => Ok(a.map(tanh)),
        Elementwise::Hadamard | Elementwise::Add | Elementwise::Sub => {
            let b = args[1];
            same_shape("elementwise", a, b)?;
            let f = match kind {
                Elementwise::Hadamard => |x: f64, y: f64| x * y,
                Elementwise::Add => |x: f64, y: f64| x + y,
                _ => |x: f64, y: f64| x - y,
            };
            Ok(Matrix {
                rows: a.rows,
                cols: a.cols,
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            })
        }
    }
}

// Slice kernels used by the recurrent layers. Shapes are checked by callers.

/// `out = W x + b`.
#[inline]
pub(crate) fn affine_into(w: &Matrix, x: &[f64], b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    for (i, o) in out.iter_mut().enumerate() {
        let row = w.row(i);
        let mut acc = b.data[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// `out += W x`.
#[inline]
pub(crate) fn matvec_acc(w: &Matrix, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (wv, xv) in w.row(i).iter().zip(x) {
            acc += wv * xv;
        }
        *o += acc;
    }
}

/// `out += Wᵀ v`.
#[inline]
pub(crate) fn matvec_t_acc(w: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += wv * vi;
        }
    }
}

/// `g += a bᵀ`.
#[inline]
pub(crate) fn outer_acc(g: &mut Matrix, a: &[f64], b: &[f64]) {
    let cols = g.cols;
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (gv, bv) in g.data[i * cols..(i + 1) * cols].iter_mut().zip(b) {
            *gv += ai * bv;
        }
    }
}

/// `g += a` for a column vector `g`.
#[inline]
pub(crate) fn vec_acc(g: &mut Matrix, a: &[f64]) {
    for (gv, av) in g.data.iter_mut().zip(a) {
        *gv += av;
    }
}

/// Gradients of a scalar objective with respect to a layer's input and
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_input: Matrix,
    pub d_params: Vec<Matrix>,
}

/// Compares an analytic backward pass against central differences.
///
/// The scalar objective is `Σ c ∘ forward(params, input)` with cotangent `c`
/// drawn uniformly from `[-1, 1]` using `seed`. `backward` receives `c` as the
/// output gradient. Returns the largest
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over every
/// parameter and input entry.
pub fn grad_check<F, B>(
    forward: F,
    backward: B,
    params: &[Matrix],
    input: &Matrix,
    epsilon: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Matrix], &Matrix) -> Result<Matrix>,
    B: Fn(&[Matrix], &Matrix, &Matrix) -> Result<LayerGrad>,
{
    if !(epsilon > 0.0) {
        return Err(Error::input("grad_check epsilon must be positive"));
    }
    let out = forward(params, input)?;
    if !out.is_finite() {
        return Err(Error::numeric("forward output is not finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cot = Matrix::uniform(out.rows, out.cols, 1.0, &mut rng);
    let objective = |p: &[Matrix], x: &Matrix| -> Result<f64> {
        let y = forward(p, x)?;
        if !y.is_finite() {
            return Err(Error::numeric("forward output is not finite"));
        }
        same_shape("grad_check", &y, &cot)?;
        Ok(y.data.iter().zip(&cot.data).map(|(a, b)| a * b).sum())
    };

    let grad = backward(params, input, &cot)?;
    same_shape("grad_check d_input", &grad.d_input, input)?;
    if grad.d_params.len() != params.len() {
        return Err(Error::Internal(format!(
            "backward returned {} parameter gradients for {} parameters",
            grad.d_params.len(),
            params.len()
        )));
    }

    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
    let mut worst: f64 = 0.0;

    let mut p = params.to_vec();
    for (k, dp) in grad.d_params.iter().enumerate() {
        same_shape("grad_check d_params", dp, &params[k])?;
        for i in 0..p[k].len() {
            let orig = p[k].data[i];
            p[k].data[i] = orig + epsilon;
            let plus = objective(&p, input)?;
            p[k].data[i] = orig - epsilon;
            let minus = objective(&p, input)?;
            p[k].data[i] = orig;
            worst = worst.max(rel(dp.data[i], (plus - minus) / (2.0 * epsilon)));
        }
    }

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data[i];
        x.data[i] = orig + epsilon;
        let plus = objective(params, &x)?;
        x.data[i] = orig - epsilon;
        let minus = objective(params, &x)?;
        x.data[i] = orig;
        worst = worst.max(rel(grad.d_input.data[i], (plus - minus) / (2.0 * epsilon)));
    }
    Ok(worst)
}

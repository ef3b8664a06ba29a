//! Dense row-major `f64` tensors.
//!
//! Tensors are plain values: an owned shape and a flat buffer. All model
//! math is expressed on 2-D tensors; a scalar is the shape `[1]`.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero-sized dimension")]
    ZeroDimension(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = rng.random_range(-bound..bound);
        }
        t
    }

    /// Normal samples with the given standard deviation (Box-Muller).
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            *x = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            false,
        );
        Tensor::new(vec![m, n], out)
    }

    /// Matrix product `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_t")?;
        let (n, k2) = other.dims2("matmul_t")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, true, &mut out, false);
        Tensor::new(vec![m, n], out)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x + y).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Adds a `[n]` or `[1, n]` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2("add_row")?;
        if vector_len(bias) != Some(c) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Row-wise layer normalization with gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        Ok(layer_norm_forward(self, gamma, beta)?.0)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        if !self.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![r, c], out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Width of a bias or gain vector, accepting `[n]` and `[1, n]`.
pub(crate) fn vector_len(t: &Tensor) -> Option<usize> {
    match t.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

/// Layer-norm output plus the normalized values and reciprocal standard
/// deviations the backward pass needs.
pub(crate) fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (r, c) = x.dims2("layer_norm")?;
    for v in [gamma, beta] {
        if vector_len(v) != Some(c) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape.clone(),
                right: v.shape.clone(),
            });
        }
    }
    let mut xhat = vec![0.0; r * c];
    let mut rstd = vec![0.0; r];
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((Tensor::new(vec![r, c], out)?, xhat, rstd))
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - max - log_total).collect()
}

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op` is an
/// optional transpose. Operands are row-major; a transposed `a` is stored as
/// `k × m`, a transposed `b` as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

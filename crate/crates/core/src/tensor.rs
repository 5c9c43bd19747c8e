//! Dense row-major tensors of rank 1 to 3.

use std::fmt;

use thiserror::Error;

/// Maximum supported rank (batch x sequence x feature).
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable {index} does not belong to this tape (len {len})")]
    ForeignVar { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("rank must be 1..={MAX_RANK}, got shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= MAX_RANK, "bad rank {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2().expect("rank-2 tensor");
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2().expect("rank-2 tensor");
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Plain row-major matrix product `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape_err = || TensorError::Shape {
        op: "matmul",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    let (m, k) = a.dims2().ok_or_else(shape_err)?;
    let (k2, n) = b.dims2().ok_or_else(shape_err)?;
    if k != k2 {
        return Err(shape_err());
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub(crate) fn matmul_bt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn matmul_at_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

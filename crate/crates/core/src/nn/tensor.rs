use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
///
/// Operations in this crate view a tensor as a matrix of `rows() x cols()`,
/// where `cols()` is the last dimension and `rows()` the product of the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// Numeric kernels shared by the differentiable ops and the tape-free
/// inference paths, so both produce bit-identical results.
pub mod kernels {
    /// `out[n x m] = a[n x k] * b[k x m]`
    pub fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `out[k x m] = a[n x k]^T * g[n x m]`
    pub fn matmul_tn(a: &[f32], g: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; k * m];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        out
    }

    /// `out[n x k] = g[n x m] * b[k x m]^T`
    pub fn matmul_nt(g: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &b[p * m..(p + 1) * m];
                out[i * k + p] = dot(grow, brow);
            }
        }
        out
    }

    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn add_row_inplace(x: &mut [f32], bias: &[f32]) {
        for row in x.chunks_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Max-shifted softmax of one row, normalizer accumulated in f64.
    pub fn softmax_row(input: &[f32], out: &mut [f32]) {
        let max = input.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (o, &z) in out.iter_mut().zip(input) {
            let e = (z - max).exp();
            *o = e;
            total += f64::from(e);
        }
        let inv = (1.0 / total) as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

    /// tanh approximation of GELU.
    pub fn gelu(x: f32) -> f32 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    }

    pub fn gelu_grad(x: f32) -> f32 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Normalizes each row; returns (output, per-row mean, per-row 1/std).
    pub fn layer_norm(
        x: &[f32],
        cols: usize,
        gamma: &[f32],
        beta: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let rows = x.len() / cols;
        let mut out = vec![0.0f32; x.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        (out, means, rstds)
    }
}

//! Dense row-major tensors of rank 1 to 3.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(LabError::shape("tensor", format!("rank {} not in 1..=3", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(LabError::shape(
                "tensor",
                format!("shape {shape:?} holds {len} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(d: usize) -> Self {
        let mut t = Self::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    /// I.i.d. draws from N(mean, std²).
    pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(LabError::Param(format!("gaussian std must be >= 0, got {std}")));
        }
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gaussian(mean, std)).collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    fn check_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(LabError::shape(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(LabError::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_matrix("matmul")?;
        let (k2, n) = other.check_matrix("matmul")?;
        if k != k2 {
            return Err(LabError::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1)))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.check_matrix("t_matmul")?;
        let (k2, n) = other.check_matrix("t_matmul")?;
        if k != k2 {
            return Err(LabError::shape("t_matmul", format!("({k}x{m})ᵀ times {k2}x{n}")));
        }
        Ok(gemm(m, k, n, &self.data, (1, m), &other.data, (n, 1)))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_matrix("matmul_t")?;
        let (n, k2) = other.check_matrix("matmul_t")?;
        if k != k2 {
            return Err(LabError::shape("matmul_t", format!("{m}x{k} times ({n}x{k2})ᵀ")));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.check_matrix("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Frobenius norm over a group of tensors, as if they were concatenated.
pub fn group_norm(ts: &[Tensor]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Tensor {
    let mut out = Tensor::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: all strides describe in-bounds layouts of `a` (m×k), `b` (k×n)
    // and the freshly allocated row-major `out` (m×n).
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
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

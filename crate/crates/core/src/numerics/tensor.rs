use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Every tensor that flows through the tape is treated as a matrix: rank-1
/// shapes `[n]` behave as `1 × n` and rank-0 as `1 × 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::invalid(format!(
                "tensors are at most rank 2, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// `(rows, cols)` under the matrix view.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Rows `indices` stacked in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self, (k, 1), other, (n, 1), &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims();
        let (n, k2) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self, (k, 1), other, (1, k), &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul_tn", &[k, m], &[k2, n]));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self, (1, m), other, (n, 1), &mut out);
        Ok(out)
    }
}

const THIN: usize = 2;

/// `out = A·B` where A is `m×k` and B is `k×n`, each given with (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &Tensor,
    (rsa, csa): (usize, usize),
    b: &Tensor,
    (rsb, csb): (usize, usize),
    out: &mut Tensor,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    if m.min(n) <= THIN {
        // Packing dominates for vector-shaped products; plain loops are faster.
        let (ad, bd) = (&a.data, &b.data);
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            if csb == 1 {
                for p in 0..k {
                    let aip = ad[i * rsa + p * csa];
                    let brow = &bd[p * rsb..p * rsb + n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            } else if csa == 1 && rsb == 1 {
                let arow = &ad[i * rsa..i * rsa + k];
                for (j, o) in row.iter_mut().enumerate() {
                    let bcol = &bd[j * csb..j * csb + k];
                    *o = arow.iter().zip(bcol).map(|(x, y)| x * y).sum();
                }
            } else {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = (0..k).map(|p| ad[i * rsa + p * csa] * bd[p * rsb + j * csb]).sum();
                }
            }
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b` (k×n),
    // and `out` is a freshly allocated contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

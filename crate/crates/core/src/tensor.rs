//! Dense row-major `f64` tensors and the GEMM helper used by every layer.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RulError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(RulError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(RulError::Shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn with_row_stride(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: row_stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) as isize * self.row_stride
                + (self.cols - 1) as isize * self.col_stride;
            assert!((last as usize) < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Below this many multiply-adds a direct loop beats matrixmultiply, whose
/// per-call packing buffers dominate for the per-timestep recurrent products.
const SMALL_GEMM: usize = 1 << 17;

fn small_gemm(a: MatRef, b: MatRef, c: &mut [f64], c_row_stride: usize, beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if a.col_stride == 1 && b.row_stride == 1 {
        // Both operands run contiguously along k: one dot product per entry.
        for i in 0..m {
            let arow = &a.data[(i as isize * a.row_stride) as usize..][..k];
            for j in 0..n {
                let bcol = &b.data[(j as isize * b.col_stride) as usize..][..k];
                let cv = &mut c[i * c_row_stride + j];
                let acc = dot(arow, bcol);
                *cv = if beta == 0.0 { acc } else { beta * *cv + acc };
            }
        }
        return;
    }
    for i in 0..m {
        let row = &mut c[i * c_row_stride..i * c_row_stride + n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let av = a.data[(i as isize * a.row_stride + p as isize * a.col_stride) as usize];
            let start = (p as isize * b.row_stride) as usize;
            if b.col_stride == 1 {
                for (cv, bv) in row.iter_mut().zip(&b.data[start..start + n]) {
                    *cv += av * bv;
                }
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b.data[start + j * b.col_stride as usize];
                }
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += u[l] * v[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(u, v)| u * v).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c = beta * c + a · b`, where `c` is row-major with the given row stride.
pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f64], c_row_stride: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_row_stride + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for row in 0..m {
            for v in &mut c[row * c_row_stride..row * c_row_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(a, b, c, c_row_stride, beta);
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` does not alias
    // `a` or `b` (it is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

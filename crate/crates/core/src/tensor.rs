//! Small dense row-major 2D tensors.
//!
//! Everything in the optimization is expressed over [rows, cols] blocks:
//! batches of samples, weight matrices, per-ray tables. Scalars are [1, 1]
//! and vectors are [n, 1] or [1, n] depending on their role.

use crate::error::InvrenderError;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data/shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape. Element count must match.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor<T> {
        assert_eq!(rows * cols, self.data.len(), "reshape element count mismatch");
        Tensor { rows, cols, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<(), InvrenderError> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(InvrenderError::NonFinite { context: what.to_string() })
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64_()).collect(),
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Tensor<T> {
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|&v| T::of(v)).collect(),
        }
    }

    /// c = a * b with a: [m, k], b: [k, n].
    pub fn matmul(&self, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.cols, b.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![T::zero(); m * n];
        // i-k-j order: the inner axpy over contiguous rows vectorizes well.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * bv;
                }
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    /// c += a^T * b with a: [m, k], b: [m, n], c: [k, n].
    pub fn matmul_at_b_into(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(out.rows, a.cols);
        assert_eq!(out.cols, b.cols);
        let (m, k, n) = (a.rows, a.cols, b.cols);
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let brow = &b.data[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }

    /// c += a * b^T with a: [m, n], b: [k, n], c: [m, k].
    pub fn matmul_a_bt_into(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
        assert_eq!(a.cols, b.cols);
        assert_eq!(out.rows, a.rows);
        assert_eq!(out.cols, b.rows);
        let (m, n, k) = (a.rows, a.cols, b.rows);
        // transpose b so the inner loop is a contiguous axpy
        let mut bt = vec![T::zero(); n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data[p * n + j];
            }
        }
        for i in 0..m {
            let arow = &a.data[i * n..(i + 1) * n];
            let orow = &mut out.data[i * k..(i + 1) * k];
            for (j, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let btrow = &bt[j * k..(j + 1) * k];
                for (o, &bv) in orow.iter_mut().zip(btrow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }
}

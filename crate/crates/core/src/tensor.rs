//! Dense row-major matrices. Row vectors multiply from the left: `y = x · W`.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[T]) {
        assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = v;
        }
    }

    /// `out = x · self`, accumulated in a fixed order (rows of `self` outermost).
    pub fn left_mul_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(T::zero());
        for (j, &xj) in x.iter().enumerate() {
            let row = self.row(j);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xj * w;
            }
        }
    }

    pub fn left_mul(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.left_mul_into(x, &mut out);
        out
    }

    /// `out = self · y` for a column vector `y` of length `cols`.
    pub fn right_mul(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(y).fold(T::zero(), |acc, (&w, &v)| acc + w * v))
            .collect()
    }

    /// `self += scale · x^T y` (rank-one update).
    pub fn add_outer(&mut self, x: &[T], y: &[T], scale: T) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            let s = xr * scale;
            if s == T::zero() {
                continue;
            }
            for (w, &v) in self.row_mut(r).iter_mut().zip(y) {
                *w += s * v;
            }
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

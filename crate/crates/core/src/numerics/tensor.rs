//! Dense row-major real matrices. Vectors are stored as single columns.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {c}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            rows: r,
            cols: c,
            data,
        })
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn diag_from(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t[(i, i)] = *v;
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut t = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let b_row = &other.data[k * n..(k + 1) * n];
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// ½(S + Sᵀ).
    pub fn symmetrized(&self) -> Tensor {
        debug_assert!(self.is_square());
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| i == j || self[(i, j)] == 0.0))
    }

    pub fn slice(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Tensor> {
        if rows.end > self.rows || cols.end > self.cols || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::shape(
                "slice",
                format!("[{rows:?}, {cols:?}] of {:?}", self.shape()),
            ));
        }
        let mut out = Tensor::zeros(rows.len(), cols.len());
        for (oi, i) in rows.clone().enumerate() {
            out.data[oi * cols.len()..(oi + 1) * cols.len()]
                .copy_from_slice(&self.data[i * self.cols + cols.start..i * self.cols + cols.end]);
        }
        Ok(out)
    }

    /// Writes `block` into `self` with its top-left corner at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Tensor) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(p) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column count {} vs {cols}", p.cols),
            ));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {rows}", p.rows),
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            out.set_block(0, c0, p);
            c0 += p.cols;
        }
        Ok(out)
    }

    /// Block-diagonal `I_n ⊗ self`.
    pub fn kron_eye(&self, n: usize) -> Tensor {
        let mut out = Tensor::zeros(n * self.rows, n * self.cols);
        for k in 0..n {
            out.set_block(k * self.rows, k * self.cols, self);
        }
        out
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> ({rows}, {cols})", self.shape()),
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }
}

impl Index<(usize, usize)> for Tensor {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Tensor {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Tensor {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Tensor::from_rows(&[vec![4.0, 5.0], vec![10.0, 11.0]]).unwrap());
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), c);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
        assert!(a.add(&Tensor::zeros(3, 2)).is_err());
        assert!(Tensor::from_vec(2, 2, vec![1.0]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn kron_eye_places_blocks_on_diagonal() {
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let k = q.kron_eye(3);
        assert_eq!(k.shape(), (6, 6));
        assert_eq!(k[(2, 3)], 2.0);
        assert_eq!(k[(5, 4)], 3.0);
        assert_eq!(k[(0, 2)], 0.0);
    }

    #[test]
    fn slicing_and_concat() {
        let a = Tensor::from_vec(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let top = a.slice(0..1, 0..3).unwrap();
        let rest = a.slice(1..3, 0..3).unwrap();
        assert_eq!(Tensor::concat_rows(&[&top, &rest]).unwrap(), a);
        let left = a.slice(0..3, 0..2).unwrap();
        let right = a.slice(0..3, 2..3).unwrap();
        assert_eq!(Tensor::concat_cols(&[&left, &right]).unwrap(), a);
    }
}

//! One matrix vocabulary, two backends.
//!
//! The parameterizations are written once against [`Algebra`]. [`Eager`]
//! evaluates them directly on tensors (linear solves, no explicit inverses
//! unless asked for); [`Graph`] records them on the tape so they can be
//! differentiated.

use super::linalg::{cholesky_factor, inverse, solve_linear};
use super::{Graph, NodeId, Tensor};
use crate::error::Result;

pub trait Algebra {
    type Mat: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Mat;
    fn value<'a>(&'a self, m: &'a Self::Mat) -> &'a Tensor;

    fn shape(&self, m: &Self::Mat) -> (usize, usize) {
        self.value(m).shape()
    }

    fn eye(&mut self, n: usize) -> Self::Mat {
        self.constant(Tensor::eye(n))
    }

    fn add(&mut self, a: &Self::Mat, b: &Self::Mat) -> Result<Self::Mat>;
    fn sub(&mut self, a: &Self::Mat, b: &Self::Mat) -> Result<Self::Mat>;
    fn matmul(&mut self, a: &Self::Mat, b: &Self::Mat) -> Result<Self::Mat>;
    fn scale(&mut self, a: &Self::Mat, s: f64) -> Result<Self::Mat>;
    fn transpose(&mut self, a: &Self::Mat) -> Result<Self::Mat>;
    fn exp(&mut self, a: &Self::Mat) -> Result<Self::Mat>;
    fn clamp(&mut self, a: &Self::Mat, lo: f64, hi: f64) -> Result<Self::Mat>;
    /// Column vector → diagonal matrix.
    fn diag(&mut self, v: &Self::Mat) -> Result<Self::Mat>;
    fn inverse(&mut self, a: &Self::Mat) -> Result<Self::Mat>;
    /// `X` with `A X = B`.
    fn solve(&mut self, a: &Self::Mat, b: &Self::Mat) -> Result<Self::Mat>;
    /// `(A⁻¹ L, R A⁻¹)` sharing one factorization or inverse of `A`.
    fn solve_both(
        &mut self,
        a: &Self::Mat,
        left: &Self::Mat,
        right: &Self::Mat,
    ) -> Result<(Self::Mat, Self::Mat)>;
    /// Upper-triangular `R` with `RᵀR = sym(S)`.
    fn cholesky(&mut self, s: &Self::Mat) -> Result<Self::Mat>;
    fn concat_rows(&mut self, parts: &[Self::Mat]) -> Result<Self::Mat>;
    fn concat_cols(&mut self, parts: &[Self::Mat]) -> Result<Self::Mat>;
    fn slice(
        &mut self,
        a: &Self::Mat,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Self::Mat>;
    /// `I_n ⊗ A`.
    fn kron_eye(&mut self, a: &Self::Mat, n: usize) -> Result<Self::Mat>;
}

/// Direct evaluation on tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Algebra for Eager {
    type Mat = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, m: &'a Tensor) -> &'a Tensor {
        m
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        Ok(a.scale(s))
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.transpose())
    }

    fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(f64::exp))
    }

    fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        Ok(a.map(|x| x.clamp(lo, hi)))
    }

    fn diag(&mut self, v: &Tensor) -> Result<Tensor> {
        if v.cols() != 1 {
            return Err(crate::Error::shape("diag", format!("expected column, got {:?}", v.shape())));
        }
        Ok(Tensor::diag_from(v.data()))
    }

    fn inverse(&mut self, a: &Tensor) -> Result<Tensor> {
        inverse(a)
    }

    fn solve(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        solve_linear(a, b)
    }

    fn solve_both(&mut self, a: &Tensor, left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor)> {
        let l = solve_linear(a, left)?;
        let r = solve_linear(&a.transpose(), &right.transpose())?.transpose();
        Ok((l, r))
    }

    fn cholesky(&mut self, s: &Tensor) -> Result<Tensor> {
        if !s.is_square() {
            return Err(crate::Error::shape("cholesky", format!("{:?}", s.shape())));
        }
        cholesky_factor(&s.symmetrized())
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn slice(
        &mut self,
        a: &Tensor,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Tensor> {
        a.slice(rows, cols)
    }

    fn kron_eye(&mut self, a: &Tensor, n: usize) -> Result<Tensor> {
        Ok(a.kron_eye(n))
    }
}

impl Algebra for Graph {
    type Mat = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        Graph::constant(self, t)
    }

    fn value<'a>(&'a self, m: &'a NodeId) -> &'a Tensor {
        Graph::value(self, *m)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::add(self, *a, *b)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::sub(self, *a, *b)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::matmul(self, *a, *b)
    }

    fn scale(&mut self, a: &NodeId, s: f64) -> Result<NodeId> {
        Graph::scale(self, *a, s)
    }

    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        Graph::transpose(self, *a)
    }

    fn exp(&mut self, a: &NodeId) -> Result<NodeId> {
        Graph::exp(self, *a)
    }

    fn clamp(&mut self, a: &NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        Graph::clamp(self, *a, lo, hi)
    }

    fn diag(&mut self, v: &NodeId) -> Result<NodeId> {
        Graph::diag(self, *v)
    }

    fn inverse(&mut self, a: &NodeId) -> Result<NodeId> {
        Graph::inverse(self, *a)
    }

    fn solve(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let inv = Graph::inverse(self, *a)?;
        Graph::matmul(self, inv, *b)
    }

    fn solve_both(&mut self, a: &NodeId, left: &NodeId, right: &NodeId) -> Result<(NodeId, NodeId)> {
        let inv = Graph::inverse(self, *a)?;
        Ok((Graph::matmul(self, inv, *left)?, Graph::matmul(self, *right, inv)?))
    }

    fn cholesky(&mut self, s: &NodeId) -> Result<NodeId> {
        Graph::cholesky(self, *s)
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        Graph::concat_rows(self, parts)
    }

    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        Graph::concat_cols(self, parts)
    }

    fn slice(
        &mut self,
        a: &NodeId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        Graph::slice(self, *a, rows, cols)
    }

    fn kron_eye(&mut self, a: &NodeId, n: usize) -> Result<NodeId> {
        Graph::kron_eye(self, *a, n)
    }
}

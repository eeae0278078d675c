//! Cayley transform from unconstrained `(Y, Z)` to `(U, V)` with
//! `UᵀU + VᵀV = I`.
//!
//! `M = Y − Yᵀ + ZᵀZ`, `U = (I + M)⁻¹(I − M)`, `V = 2 Z (I + M)⁻¹`.
//! `I + M` is always invertible: its symmetric part is `I + ZᵀZ ⪰ I`.

use crate::error::{Error, Result};
use crate::numerics::{Algebra, Eager, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CayleyOutput {
    pub u: Tensor,
    pub v: Tensor,
}

pub fn cayley_with<A: Algebra>(alg: &mut A, y: &A::Mat, z: &A::Mat) -> Result<(A::Mat, A::Mat)> {
    let (n, n2) = alg.shape(y);
    let (_, zc) = alg.shape(z);
    if n != n2 || zc != n {
        return Err(Error::shape(
            "cayley",
            format!("Y {:?}, Z {:?}", alg.shape(y), alg.shape(z)),
        ));
    }
    let y_t = alg.transpose(y)?;
    let skew = alg.sub(y, &y_t)?;
    let z_t = alg.transpose(z)?;
    let ztz = alg.matmul(&z_t, z)?;
    let m = alg.add(&skew, &ztz)?;
    let eye = alg.eye(n);
    let i_plus = alg.add(&eye, &m)?;
    let i_minus = alg.sub(&eye, &m)?;
    let (u, z_inv) = alg.solve_both(&i_plus, &i_minus, z)?;
    let v = alg.scale(&z_inv, 2.0)?;
    Ok((u, v))
}

/// Splits a tall `m × n` matrix into its top `n × n` block `Y` and the
/// remaining rows `Z`, and returns the stacked `[U; V]`.
pub fn cayley_stiefel_with<A: Algebra>(alg: &mut A, t: &A::Mat) -> Result<A::Mat> {
    let (m, n) = alg.shape(t);
    if m < n {
        return Err(Error::shape(
            "cayley_stiefel",
            format!("need rows ≥ cols, got {m}x{n}"),
        ));
    }
    let y = alg.slice(t, 0..n, 0..n)?;
    let z = alg.slice(t, n..m, 0..n)?;
    let (u, v) = cayley_with(alg, &y, &z)?;
    alg.concat_rows(&[u, v])
}

/// Tall input: orthonormal columns. Wide input: orthonormal rows, via the
/// transpose. Either way `WᵀW ⪯ I`.
pub fn semi_orthogonal_with<A: Algebra>(alg: &mut A, t: &A::Mat) -> Result<A::Mat> {
    let (m, n) = alg.shape(t);
    if m >= n {
        cayley_stiefel_with(alg, t)
    } else {
        let t_t = alg.transpose(t)?;
        let w = cayley_stiefel_with(alg, &t_t)?;
        alg.transpose(&w)
    }
}

pub fn cayley(y: &Tensor, z: &Tensor) -> Result<CayleyOutput> {
    let (u, v) = cayley_with(&mut Eager, y, z)?;
    Ok(CayleyOutput { u, v })
}

pub fn cayley_stiefel(t: &Tensor) -> Result<Tensor> {
    cayley_stiefel_with(&mut Eager, t)
}

pub fn semi_orthogonal(t: &Tensor) -> Result<Tensor> {
    semi_orthogonal_with(&mut Eager, t)
}

/// `‖UᵀU + VᵀV − I‖_F`.
pub fn orthogonality_defect(out: &CayleyOutput) -> f64 {
    let n = out.u.cols();
    let s = out
        .u
        .t_matmul(&out.u)
        .and_then(|a| a.add(&out.v.t_matmul(&out.v)?))
        .and_then(|a| a.sub(&Tensor::eye(n)));
    s.map_or(f64::INFINITY, |d| d.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Graph};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_identity() {
        let out = cayley(&Tensor::zeros(1, 1), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(out.u, Tensor::eye(1));
        assert_eq!(out.v, Tensor::zeros(1, 1));
        let out = cayley(&Tensor::zeros(3, 3), &Tensor::zeros(2, 3)).unwrap();
        assert_eq!(out.u, Tensor::eye(3));
        assert_eq!(out.v, Tensor::zeros(2, 3));
    }

    #[test]
    fn scalar_forced_arithmetic() {
        // M = 1, U = (1 + 1)⁻¹ (1 − 1) = 0, V = 2 · 1 / 2 = 1.
        let out = cayley(&Tensor::zeros(1, 1), &Tensor::eye(1)).unwrap();
        assert_eq!(out.u[(0, 0)], 0.0);
        assert_eq!(out.v[(0, 0)], 1.0);
    }

    #[test]
    fn random_draw_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = Tensor::randn(3, 3, 1.0, &mut rng);
        let z = Tensor::randn(4, 3, 1.0, &mut rng);
        assert!(orthogonality_defect(&cayley(&y, &z).unwrap()) <= 1e-12);
    }

    #[test]
    fn stiefel_cases() {
        assert_eq!(cayley_stiefel(&Tensor::zeros(2, 1)).unwrap(), Tensor::column(&[1.0, 0.0]));
        assert_eq!(cayley_stiefel(&Tensor::zeros(3, 3)).unwrap(), Tensor::eye(3));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = cayley_stiefel(&Tensor::randn(6, 2, 1.0, &mut rng)).unwrap();
        let d = w.t_matmul(&w).unwrap().sub(&Tensor::eye(2)).unwrap().frobenius_norm();
        assert!(d <= 1e-12);
        assert!(matches!(
            cayley_stiefel(&Tensor::zeros(1, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn wide_semi_orthogonal_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w = semi_orthogonal(&Tensor::randn(2, 5, 1.0, &mut rng)).unwrap();
        assert_eq!(w.shape(), (2, 5));
        let d = w.matmul(&w.transpose()).unwrap().sub(&Tensor::eye(2)).unwrap();
        assert!(d.frobenius_norm() <= 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(cayley(&Tensor::zeros(2, 3), &Tensor::zeros(1, 3)).is_err());
        assert!(cayley(&Tensor::zeros(2, 2), &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn gradients_through_cayley() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut g = Graph::new();
        let y = g.trainable("Y", Tensor::randn(3, 3, 0.7, &mut rng));
        let z = g.trainable("Z", Tensor::randn(2, 3, 0.7, &mut rng));
        let (u, v) = cayley_with(&mut g, &y, &z).unwrap();
        let target = g.constant(Tensor::randn(3, 3, 1.0, &mut rng));
        let du = g.sub(u, target).unwrap();
        let a = g.sum_squares(du).unwrap();
        let b = g.sum_all(v).unwrap();
        let loss = g.add(a, b).unwrap();
        assert!(grad_check(&g, loss, 1e-6).unwrap() <= 1e-5);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn orthogonality_holds_for_any_input(
            (y, z) in (1usize..6, 0usize..6).prop_flat_map(|(n, m)| (matrix(n, n), matrix(m, n)))
        ) {
            let out = cayley(&y, &z).unwrap();
            prop_assert!(orthogonality_defect(&out) <= 1e-10);
        }
    }
}

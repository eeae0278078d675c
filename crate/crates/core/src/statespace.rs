//! State-space realization of 1D convolutions and the controllability
//! Gramian that makes the upper-left LMI block positive definite.
//!
//! A kernel stack `K_0..K_{ℓ−1}` (each `c_out × c_in`) is realized with the
//! state holding the last `ℓ − 1` inputs, oldest block first:
//!
//! ```text
//! x_{k+1} = A x_k + B w_k,   y_k = C x_k + D w_k + b
//! A = block shift, B = [0 … 0 I]ᵀ, C = [K_{ℓ−1} … K_1], D = K_0
//! ```
//!
//! A kernel of size one gives a zero-dimensional state.

use crate::error::{Error, Result};
use crate::numerics::{cholesky_factor, solve_linear, Algebra, Eager, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub bias: Tensor,
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Realization {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    /// `[C D]`.
    pub fn c_hat(&self) -> Tensor {
        Tensor::concat_cols(&[&self.c, &self.d]).expect("C and D share a row count")
    }
}

#[derive(Clone, Debug)]
pub struct GramianInputs {
    pub q_prev: Tensor,
    pub h: Tensor,
    pub eps: f64,
}

/// The constant shift pair `(A, B)` for kernel size `ell` and `c_in` input channels.
pub fn shift_matrices(kernel_size: usize, c_in: usize) -> (Tensor, Tensor) {
    let n_x = kernel_size.saturating_sub(1) * c_in;
    let mut a = Tensor::zeros(n_x, n_x);
    for blk in 0..kernel_size.saturating_sub(2) {
        for ch in 0..c_in {
            a[(blk * c_in + ch, (blk + 1) * c_in + ch)] = 1.0;
        }
    }
    let mut b = Tensor::zeros(n_x, c_in);
    if n_x > 0 {
        for ch in 0..c_in {
            b[(n_x - c_in + ch, ch)] = 1.0;
        }
    }
    (a, b)
}

pub fn shift_realization(kernels: &[Tensor], bias: &Tensor) -> Result<Realization> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::shape("shift_realization", "empty kernel stack"))?;
    let (c_out, c_in) = first.shape();
    if let Some((j, k)) = kernels.iter().enumerate().find(|(_, k)| k.shape() != (c_out, c_in)) {
        return Err(Error::shape(
            "shift_realization",
            format!("K_{j} is {:?}, K_0 is {:?}", k.shape(), (c_out, c_in)),
        ));
    }
    if bias.shape() != (c_out, 1) {
        return Err(Error::shape("shift_realization", format!("bias {:?}", bias.shape())));
    }
    let ell = kernels.len();
    let (a, b) = shift_matrices(ell, c_in);
    let c_blocks: Vec<&Tensor> = kernels[1..].iter().rev().collect();
    let c = if c_blocks.is_empty() {
        Tensor::zeros(c_out, 0)
    } else {
        Tensor::concat_cols(&c_blocks)?
    };
    Ok(Realization {
        a,
        b,
        c,
        d: kernels[0].clone(),
        bias: bias.clone(),
        kernel_size: ell,
        c_in,
        c_out,
    })
}

/// Splits `[C D] = [K_{ℓ−1} … K_1 K_0]` back into `K_0..K_{ℓ−1}`.
pub fn kernels_from_c_hat(c_hat: &Tensor, kernel_size: usize) -> Result<Vec<Tensor>> {
    let (c_out, width) = c_hat.shape();
    if kernel_size == 0 || width % kernel_size != 0 {
        return Err(Error::shape(
            "kernels_from_c_hat",
            format!("width {width} is not a multiple of kernel size {kernel_size}"),
        ));
    }
    let c_in = width / kernel_size;
    (0..kernel_size)
        .map(|j| {
            let blk = kernel_size - 1 - j;
            c_hat.slice(0..c_out, blk * c_in..(blk + 1) * c_in)
        })
        .collect()
}

/// `X = Σ_{k=0}^{ℓ−2} A^k (B Q⁻¹ Bᵀ + HᵀH + εI) (Aᵀ)^k`, the unique solution of
/// `X − A X Aᵀ = B Q⁻¹ Bᵀ + HᵀH + εI` for the nilpotent shift `A`.
pub fn gramian_with<A: Algebra>(
    alg: &mut A,
    kernel_size: usize,
    c_in: usize,
    q_prev_inv: &A::Mat,
    h: &A::Mat,
    eps: f64,
) -> Result<A::Mat> {
    let (a, b) = shift_matrices(kernel_size, c_in);
    let n_x = a.rows();
    if alg.shape(h) != (n_x, n_x) || alg.shape(q_prev_inv) != (c_in, c_in) {
        return Err(Error::shape(
            "controllability_gramian",
            format!(
                "H {:?}, Q⁻¹ {:?} for n_x = {n_x}, c_in = {c_in}",
                alg.shape(h),
                alg.shape(q_prev_inv)
            ),
        ));
    }
    if n_x == 0 {
        return Ok(alg.constant(Tensor::zeros(0, 0)));
    }
    let a_t = alg.constant(a.transpose());
    let a = alg.constant(a);
    let b_t = alg.constant(b.transpose());
    let b = alg.constant(b);
    let bq = alg.matmul(&b, q_prev_inv)?;
    let bqb = alg.matmul(&bq, &b_t)?;
    let h_t = alg.transpose(h)?;
    let hh = alg.matmul(&h_t, h)?;
    let eps_i = alg.constant(Tensor::eye(n_x).scale(eps));
    let m = alg.add(&bqb, &hh)?;
    let m = alg.add(&m, &eps_i)?;
    let mut x = m.clone();
    let mut term = m;
    for _ in 1..kernel_size - 1 {
        let at = alg.matmul(&a, &term)?;
        term = alg.matmul(&at, &a_t)?;
        x = alg.add(&x, &term)?;
    }
    Ok(x)
}

/// `F = [[P − AᵀPA, −AᵀPB], [−BᵀPA, Q − BᵀPB]]`, written as
/// `blockdiag(P, Q) − Eᵀ P E` with `E = [A B]`. Empty state gives `F = Q`.
pub fn build_f_with<A: Algebra>(
    alg: &mut A,
    kernel_size: usize,
    c_in: usize,
    p: &A::Mat,
    q_prev: &A::Mat,
) -> Result<A::Mat> {
    let (a, b) = shift_matrices(kernel_size, c_in);
    let n_x = a.rows();
    if alg.shape(p) != (n_x, n_x) || alg.shape(q_prev) != (c_in, c_in) {
        return Err(Error::shape(
            "build_F",
            format!("P {:?}, Q {:?} for n_x = {n_x}, c_in = {c_in}", alg.shape(p), alg.shape(q_prev)),
        ));
    }
    if n_x == 0 {
        return Ok(q_prev.clone());
    }
    let e = Tensor::concat_cols(&[&a, &b])?;
    let e_t = alg.constant(e.transpose());
    let e = alg.constant(e);
    let z_top = alg.constant(Tensor::zeros(n_x, c_in));
    let z_bot = alg.constant(Tensor::zeros(c_in, n_x));
    let top = alg.concat_cols(&[p.clone(), z_top])?;
    let bottom = alg.concat_cols(&[z_bot, q_prev.clone()])?;
    let block = alg.concat_rows(&[top, bottom])?;
    let pe = alg.matmul(p, &e)?;
    let epe = alg.matmul(&e_t, &pe)?;
    alg.sub(&block, &epe)
}

fn check_inputs(r: &Realization, g: &GramianInputs) -> Result<()> {
    let n_x = r.state_dim();
    if g.q_prev.shape() != (r.c_in, r.c_in) || g.h.shape() != (n_x, n_x) {
        return Err(Error::shape(
            "controllability_gramian",
            format!("Q {:?}, H {:?}, n_x = {n_x}", g.q_prev.shape(), g.h.shape()),
        ));
    }
    if g.eps <= 0.0 || !g.eps.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {}", g.eps)));
    }
    Ok(())
}

pub fn controllability_gramian(r: &Realization, g: &GramianInputs) -> Result<Tensor> {
    check_inputs(r, g)?;
    let q_inv = solve_linear(&g.q_prev, &Tensor::eye(r.c_in))?.symmetrized();
    let x = gramian_with(&mut Eager, r.kernel_size, r.c_in, &q_inv, &g.h, g.eps)?.symmetrized();
    cholesky_factor(&x)?;
    Ok(x)
}

/// `‖X − A X Aᵀ − B Q⁻¹ Bᵀ − HᵀH − εI‖_F`.
pub fn lyapunov_residual(x: &Tensor, r: &Realization, g: &GramianInputs) -> Result<f64> {
    check_inputs(r, g)?;
    let n_x = r.state_dim();
    if x.shape() != (n_x, n_x) {
        return Err(Error::shape("lyapunov_residual", format!("X is {:?}", x.shape())));
    }
    let q_inv = solve_linear(&g.q_prev, &Tensor::eye(r.c_in))?;
    let axa = r.a.matmul(x)?.matmul(&r.a.transpose())?;
    let bqb = r.b.matmul(&q_inv)?.matmul(&r.b.transpose())?;
    let hh = g.h.t_matmul(&g.h)?;
    let res = x
        .sub(&axa)?
        .sub(&bqb)?
        .sub(&hh)?
        .sub(&Tensor::eye(n_x).scale(g.eps))?;
    Ok(res.frobenius_norm())
}

/// Runs the recursion from a zero state over a `c_in × N` signal.
pub fn simulate(r: &Realization, w: &Tensor) -> Result<Tensor> {
    if w.rows() != r.c_in || w.cols() == 0 {
        return Err(Error::shape(
            "simulate",
            format!("signal {:?}, realization expects {} channels", w.shape(), r.c_in),
        ));
    }
    let n = w.cols();
    let mut x = Tensor::zeros(r.state_dim(), 1);
    let mut out = Tensor::zeros(r.c_out, n);
    for k in 0..n {
        let wk = w.slice(0..r.c_in, k..k + 1)?;
        let yk = r.c.matmul(&x)?.add(&r.d.matmul(&wk)?)?.add(&r.bias)?;
        for i in 0..r.c_out {
            out[(i, k)] = yk[(i, 0)];
        }
        x = r.a.matmul(&x)?.add(&r.b.matmul(&wk)?)?;
    }
    Ok(out)
}

pub fn build_f(r: &Realization, p: &Tensor, q_prev: &Tensor) -> Result<Tensor> {
    Ok(build_f_with(&mut Eager, r.kernel_size, r.c_in, p, q_prev)?.symmetrized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inverse, min_eigenvalue_sym};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_kernels(k: &[f64]) -> Vec<Tensor> {
        k.iter().map(|v| Tensor::from_rows(&[vec![*v]]).unwrap()).collect()
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let g = Tensor::randn(n, n, 1.0, rng);
        g.t_matmul(&g).unwrap().add(&Tensor::eye(n).scale(0.1)).unwrap()
    }

    #[test]
    fn realization_of_scalar_three_tap_filter() {
        let r = shift_realization(&scalar_kernels(&[1.0, 2.0, 3.0]), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(r.a, Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap());
        assert_eq!(r.b, Tensor::column(&[0.0, 1.0]));
        assert_eq!(r.c, Tensor::from_rows(&[vec![3.0, 2.0]]).unwrap());
        assert_eq!(r.d, Tensor::from_rows(&[vec![1.0]]).unwrap());
    }

    #[test]
    fn memoryless_layer_has_empty_state() {
        let r = shift_realization(&scalar_kernels(&[5.0]), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(r.state_dim(), 0);
        assert_eq!(r.b.shape(), (0, 1));
        assert_eq!(r.c.shape(), (1, 0));
        assert_eq!(r.d[(0, 0)], 5.0);
    }

    #[test]
    fn shift_is_nilpotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ks: Vec<Tensor> = (0..4).map(|_| Tensor::randn(3, 2, 1.0, &mut rng)).collect();
        let r = shift_realization(&ks, &Tensor::zeros(3, 1)).unwrap();
        assert_eq!(r.state_dim(), 6);
        let mut p = Tensor::eye(6);
        for _ in 0..2 {
            p = p.matmul(&r.a).unwrap();
        }
        assert!(p.max_abs() > 0.0, "A² must not vanish yet");
        p = p.matmul(&r.a).unwrap();
        assert_eq!(p, Tensor::zeros(6, 6));
    }

    #[test]
    fn mismatched_kernels_are_rejected() {
        let ks = vec![Tensor::zeros(2, 1), Tensor::zeros(1, 1)];
        assert!(matches!(
            shift_realization(&ks, &Tensor::zeros(2, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kernel_recovery_inverts_c_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ks: Vec<Tensor> = (0..3).map(|_| Tensor::randn(2, 3, 1.0, &mut rng)).collect();
        let r = shift_realization(&ks, &Tensor::zeros(2, 1)).unwrap();
        assert_eq!(kernels_from_c_hat(&r.c_hat(), 3).unwrap(), ks);
    }

    #[test]
    fn gramian_single_term() {
        let r = shift_realization(&scalar_kernels(&[0.0, 0.0]), &Tensor::zeros(1, 1)).unwrap();
        let g = GramianInputs {
            q_prev: Tensor::eye(1),
            h: Tensor::zeros(1, 1),
            eps: 1e-3,
        };
        let x = controllability_gramian(&r, &g).unwrap();
        assert!((x[(0, 0)] - 1.001).abs() < 1e-15);
    }

    #[test]
    fn gramian_two_terms_by_hand() {
        // M = diag(ε, 1 + ε); A M Aᵀ = diag(1 + ε, 0).
        let eps = 0.25;
        let r = shift_realization(&scalar_kernels(&[0.0, 0.0, 0.0]), &Tensor::zeros(1, 1)).unwrap();
        let g = GramianInputs {
            q_prev: Tensor::eye(1),
            h: Tensor::zeros(2, 2),
            eps,
        };
        let x = controllability_gramian(&r, &g).unwrap();
        assert_eq!(x, Tensor::diag_from(&[1.0 + 2.0 * eps, 1.0 + eps]));
        assert!(lyapunov_residual(&x, &r, &g).unwrap() < 1e-15);
    }

    #[test]
    fn gramian_solves_lyapunov_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ks: Vec<Tensor> = (0..4).map(|_| Tensor::randn(2, 3, 1.0, &mut rng)).collect();
        let r = shift_realization(&ks, &Tensor::zeros(2, 1)).unwrap();
        let g = GramianInputs {
            q_prev: random_spd(3, &mut rng),
            h: Tensor::randn(9, 9, 1.0, &mut rng),
            eps: 1e-6,
        };
        let x = controllability_gramian(&r, &g).unwrap();
        assert!(lyapunov_residual(&x, &r, &g).unwrap() <= 1e-10);
    }

    #[test]
    fn residual_of_zero_and_perturbed_solutions() {
        let r = shift_realization(&scalar_kernels(&[0.0, 0.0]), &Tensor::zeros(1, 1)).unwrap();
        let g = GramianInputs {
            q_prev: Tensor::eye(1),
            h: Tensor::zeros(1, 1),
            eps: 1.0,
        };
        assert_eq!(lyapunov_residual(&Tensor::zeros(1, 1), &r, &g).unwrap(), 2.0);
        let x = controllability_gramian(&r, &g).unwrap();
        let perturbed = x.add(&Tensor::eye(1).scale(1e-3)).unwrap();
        assert!(lyapunov_residual(&perturbed, &r, &g).unwrap() > 0.0);
    }

    #[test]
    fn simulate_identity_and_delay() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        let id = shift_realization(&scalar_kernels(&[1.0]), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(simulate(&id, &w).unwrap(), w);
        let delay = shift_realization(&scalar_kernels(&[0.0, 1.0]), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(
            simulate(&delay, &w).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0, -2.0, 3.0]]).unwrap()
        );
    }

    #[test]
    fn simulate_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (c_in, c_out, ell, n) = (2, 3, 4, 20);
        let ks: Vec<Tensor> = (0..ell).map(|_| Tensor::randn(c_out, c_in, 1.0, &mut rng)).collect();
        let bias = Tensor::randn(c_out, 1, 1.0, &mut rng);
        let w = Tensor::randn(c_in, n, 1.0, &mut rng);
        let r = shift_realization(&ks, &bias).unwrap();
        let y = simulate(&r, &w).unwrap();
        for k in 0..n {
            for o in 0..c_out {
                let mut direct = bias[(o, 0)];
                for (j, kj) in ks.iter().enumerate() {
                    if k >= j {
                        for i in 0..c_in {
                            direct += kj[(o, i)] * w[(i, k - j)];
                        }
                    }
                }
                assert!((y[(o, k)] - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn f_reduces_to_q_for_empty_state() {
        let r = shift_realization(&[Tensor::zeros(2, 2)], &Tensor::zeros(2, 1)).unwrap();
        let q = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(build_f(&r, &Tensor::zeros(0, 0), &q).unwrap(), q);
    }

    #[test]
    fn f_from_gramian_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ks: Vec<Tensor> = (0..3).map(|_| Tensor::randn(2, 2, 1.0, &mut rng)).collect();
        let r = shift_realization(&ks, &Tensor::zeros(2, 1)).unwrap();
        let g = GramianInputs {
            q_prev: random_spd(2, &mut rng),
            h: Tensor::randn(4, 4, 1.0, &mut rng),
            eps: 1e-6,
        };
        let x = controllability_gramian(&r, &g).unwrap();
        let p = inverse(&x).unwrap().symmetrized();
        let f = build_f(&r, &p, &g.q_prev).unwrap();
        assert!(min_eigenvalue_sym(&f).unwrap() > -1e-10);
    }

    #[test]
    fn f_scalar_hand_evaluation() {
        // ℓ = 2, c = 1: A = 0, B = 1, X = 1 + ε, P = 1/(1 + ε).
        // F = [[P, 0], [0, 1 − P]].
        let eps = 1e-3;
        let r = shift_realization(&scalar_kernels(&[0.0, 0.0]), &Tensor::zeros(1, 1)).unwrap();
        let g = GramianInputs {
            q_prev: Tensor::eye(1),
            h: Tensor::zeros(1, 1),
            eps,
        };
        let x = controllability_gramian(&r, &g).unwrap();
        let p = inverse(&x).unwrap();
        let f = build_f(&r, &p, &g.q_prev).unwrap();
        let pv = 1.0 / (1.0 + eps);
        assert!((f[(0, 0)] - pv).abs() < 1e-15);
        assert_eq!(f[(0, 1)], 0.0);
        assert!((f[(1, 1)] - (1.0 - pv)).abs() < 1e-15);
    }
}

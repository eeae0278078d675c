//! Direct parameterizations from free variables to layer weights.
//!
//! Each layer threads an auxiliary factor `L` to the next: the LMI of layer
//! `i` is written in terms of `Q_{i−1} = L_{i−1}ᵀ L_{i−1}` and
//! `Q_i = L_iᵀ L_i`, and the weights are built so that the LMI holds with
//! equality in its Schur complement. The construction is generic over
//! [`Algebra`], so the same code produces plain tensors for inference and
//! certification, and a differentiable tape for training.

use rand::Rng;

use crate::cayley::{cayley_with, semi_orthogonal_with};
use crate::error::{Error, Result};
use crate::numerics::{Algebra, Eager, Lu, Tensor};
use crate::statespace::{build_f_with, gramian_with, kernels_from_c_hat};

/// Bound applied to log-scale variables before exponentiation.
pub const LOG_CLAMP: f64 = 30.0;

/// Free variables of a fully connected layer. `gamma` is absent for the
/// last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFreeVars<M = Tensor> {
    pub y: M,
    pub z: M,
    pub gamma: Option<M>,
    pub b: M,
}

/// Free variables of a convolutional layer without pooling or with average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFreeVars<M = Tensor> {
    pub y: M,
    pub z: M,
    pub h: M,
    pub gamma: M,
    pub b: M,
}

/// Free variables of a convolutional layer followed by max pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMaxFreeVars<M = Tensor> {
    pub y_tilde: M,
    pub h: M,
    pub gamma_tilde: M,
    pub l: M,
    pub b: M,
}

/// Certificate matrices emitted alongside a layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCertificate {
    pub q: Tensor,
    /// Diagonal multiplier matrix `Λ`.
    pub lambda: Tensor,
    pub p: Option<Tensor>,
    pub f: Option<Tensor>,
}

pub struct DenseHiddenParts<M> {
    pub w: M,
    pub l_next: M,
    pub gamma: M,
}

pub struct ConvParts<M> {
    pub c_hat: M,
    pub l_next: M,
    pub lambda: M,
    pub p: M,
    pub f: M,
}

fn exp_diag<A: Algebra>(alg: &mut A, v: &A::Mat, factor: f64) -> Result<A::Mat> {
    let c = alg.clamp(v, -LOG_CLAMP, LOG_CLAMP)?;
    let s = alg.scale(&c, factor)?;
    let e = alg.exp(&s)?;
    alg.diag(&e)
}

fn check_vector<A: Algebra>(alg: &A, v: &A::Mat, n: usize, what: &str) -> Result<()> {
    if alg.shape(v) != (n, 1) {
        return Err(Error::shape(
            "parameterization",
            format!("{what} is {:?}, expected ({n}, 1)", alg.shape(v)),
        ));
    }
    Ok(())
}

/// `W = √2 Γ⁻¹ Vᵀ L_prev`, `L = √2 U Γ` with `Γ = diag(exp γ)`.
pub fn dense_hidden_with<A: Algebra>(
    alg: &mut A,
    fv: &DenseFreeVars<A::Mat>,
    l_prev: &A::Mat,
) -> Result<DenseHiddenParts<A::Mat>> {
    let gamma = fv
        .gamma
        .as_ref()
        .ok_or_else(|| Error::Config("hidden dense layer needs gamma".into()))?;
    let n = alg.shape(&fv.y).0;
    check_vector(alg, gamma, n, "gamma")?;
    check_vector(alg, &fv.b, n, "bias")?;
    let (u, v) = cayley_with(alg, &fv.y, &fv.z)?;
    let g = exp_diag(alg, gamma, 1.0)?;
    let g_inv = exp_diag(alg, gamma, -1.0)?;
    let v_t = alg.transpose(&v)?;
    let gv = alg.matmul(&g_inv, &v_t)?;
    let gvl = alg.matmul(&gv, l_prev)?;
    let w = alg.scale(&gvl, std::f64::consts::SQRT_2)?;
    let ug = alg.matmul(&u, &g)?;
    let l_next = alg.scale(&ug, std::f64::consts::SQRT_2)?;
    Ok(DenseHiddenParts {
        w,
        l_next,
        gamma: g,
    })
}

/// `W = Vᵀ L_prev`.
pub fn dense_last_with<A: Algebra>(alg: &mut A, fv: &DenseFreeVars<A::Mat>, l_prev: &A::Mat) -> Result<A::Mat> {
    let n = alg.shape(&fv.y).0;
    check_vector(alg, &fv.b, n, "bias")?;
    let (_, v) = cayley_with(alg, &fv.y, &fv.z)?;
    let v_t = alg.transpose(&v)?;
    alg.matmul(&v_t, l_prev)
}

/// Gramian → `P = X⁻¹` → `F` → `L^F` with `F = L^Fᵀ L^F`. An empty state
/// uses `L^F = L_prev` directly.
fn lmi_block_factor<A: Algebra>(
    alg: &mut A,
    l_prev: &A::Mat,
    h: &A::Mat,
    kernel_size: usize,
    eps: f64,
) -> Result<(A::Mat, A::Mat, A::Mat)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let c_in = alg.shape(l_prev).1;
    let l_t = alg.transpose(l_prev)?;
    let q_prev = alg.matmul(&l_t, l_prev)?;
    let n_x = kernel_size.saturating_sub(1) * c_in;
    if n_x == 0 {
        let p = alg.constant(Tensor::zeros(0, 0));
        return Ok((p, q_prev, l_prev.clone()));
    }
    let eye = alg.eye(c_in);
    let q_inv = alg.solve(&q_prev, &eye)?;
    let x = gramian_with(alg, kernel_size, c_in, &q_inv, h, eps)?;
    let p = alg.inverse(&x)?;
    let f = build_f_with(alg, kernel_size, c_in, &p, &q_prev)?;
    let l_f = alg.cholesky(&f)?;
    Ok((p, f, l_f))
}

/// `Ĉ = √2 Γ⁻¹ Vᵀ L^F`, `L = √2 U Γ`.
pub fn conv_layer_with<A: Algebra>(
    alg: &mut A,
    fv: &ConvFreeVars<A::Mat>,
    l_prev: &A::Mat,
    kernel_size: usize,
    eps: f64,
) -> Result<ConvParts<A::Mat>> {
    let c_out = alg.shape(&fv.y).0;
    check_vector(alg, &fv.gamma, c_out, "gamma")?;
    check_vector(alg, &fv.b, c_out, "bias")?;
    let (p, f, l_f) = lmi_block_factor(alg, l_prev, &fv.h, kernel_size, eps)?;
    let (u, v) = cayley_with(alg, &fv.y, &fv.z)?;
    let g = exp_diag(alg, &fv.gamma, 1.0)?;
    let g_inv = exp_diag(alg, &fv.gamma, -1.0)?;
    let lambda = alg.matmul(&g, &g)?;
    let v_t = alg.transpose(&v)?;
    let gv = alg.matmul(&g_inv, &v_t)?;
    let gvl = alg.matmul(&gv, &l_f)?;
    let c_hat = alg.scale(&gvl, std::f64::consts::SQRT_2)?;
    let ug = alg.matmul(&u, &g)?;
    let l_next = alg.scale(&ug, std::f64::consts::SQRT_2)?;
    Ok(ConvParts {
        c_hat,
        l_next,
        lambda,
        p,
        f,
    })
}

/// `Ĉ = Λ⁻¹ Γ̃ Ũᵀ L^F` with `Λ = ½(Γ̃² + Q)`, `L = diag(exp l)`, `Q = L²` diagonal.
pub fn conv_maxpool_with<A: Algebra>(
    alg: &mut A,
    fv: &ConvMaxFreeVars<A::Mat>,
    l_prev: &A::Mat,
    kernel_size: usize,
    eps: f64,
) -> Result<ConvParts<A::Mat>> {
    let c_out = alg.shape(&fv.y_tilde).1;
    check_vector(alg, &fv.gamma_tilde, c_out, "gamma_tilde")?;
    check_vector(alg, &fv.l, c_out, "l")?;
    check_vector(alg, &fv.b, c_out, "bias")?;
    let (p, f, l_f) = lmi_block_factor(alg, l_prev, &fv.h, kernel_size, eps)?;
    let l_next = exp_diag(alg, &fv.l, 1.0)?;
    let q = exp_diag(alg, &fv.l, 2.0)?;
    let g = exp_diag(alg, &fv.gamma_tilde, 1.0)?;
    let g2 = exp_diag(alg, &fv.gamma_tilde, 2.0)?;
    let sum = alg.add(&g2, &q)?;
    let lambda = alg.scale(&sum, 0.5)?;
    let lambda_inv = alg.inverse(&lambda)?;
    let u = semi_orthogonal_with(alg, &fv.y_tilde)?;
    let u_t = alg.transpose(&u)?;
    let lg = alg.matmul(&lambda_inv, &g)?;
    let lgu = alg.matmul(&lg, &u_t)?;
    let c_hat = alg.matmul(&lgu, &l_f)?;
    Ok(ConvParts {
        c_hat,
        l_next,
        lambda,
        p,
        f,
    })
}

/// `W = ρ Ũᵀ` for a standalone `ρ`-Lipschitz linear layer.
pub fn lipschitz_dense_with<A: Algebra>(alg: &mut A, y_tilde: &A::Mat, rho: f64) -> Result<A::Mat> {
    check_rho(rho)?;
    let u = semi_orthogonal_with(alg, y_tilde)?;
    let u_t = alg.transpose(&u)?;
    alg.scale(&u_t, rho)
}

/// `Ĉ = Ũᵀ L^F` with `Q_prev = ρ² I`, for a standalone `ρ`-Lipschitz convolution.
pub fn lipschitz_conv_with<A: Algebra>(
    alg: &mut A,
    y_tilde: &A::Mat,
    h: &A::Mat,
    rho: f64,
    kernel_size: usize,
    eps: f64,
) -> Result<A::Mat> {
    check_rho(rho)?;
    let rows = alg.shape(y_tilde).0;
    if kernel_size == 0 || rows % kernel_size != 0 {
        return Err(Error::shape(
            "lipschitz_conv",
            format!("Ỹ has {rows} rows, not a multiple of kernel size {kernel_size}"),
        ));
    }
    let c_in = rows / kernel_size;
    let l_prev = alg.constant(Tensor::eye(c_in).scale(rho));
    let (_, _, l_f) = lmi_block_factor(alg, &l_prev, h, kernel_size, eps)?;
    let u = semi_orthogonal_with(alg, y_tilde)?;
    let u_t = alg.transpose(&u)?;
    alg.matmul(&u_t, &l_f)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

/// Rejects an `L_prev` that cannot be factored; the layer index is filled in
/// by the caller.
pub(crate) fn check_prev(l_prev: &Tensor) -> Result<()> {
    if !l_prev.is_square() {
        return Err(Error::shape("L_prev", format!("{:?}", l_prev.shape())));
    }
    if !l_prev.is_finite() || Lu::factor(l_prev).is_err() {
        return Err(Error::SingularPrev { layer: 0 });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DenseHidden {
    pub w: Tensor,
    pub b: Tensor,
    pub l_next: Tensor,
    pub cert: LayerCertificate,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    /// `K_0..K_{ℓ−1}`.
    pub kernels: Vec<Tensor>,
    pub c_hat: Tensor,
    pub b: Tensor,
    pub l_next: Tensor,
    pub cert: LayerCertificate,
}

pub fn dense_hidden(fv: &DenseFreeVars, l_prev: &Tensor) -> Result<DenseHidden> {
    check_prev(l_prev)?;
    let parts = dense_hidden_with(&mut Eager, fv, l_prev)?;
    let lambda = parts.gamma.matmul(&parts.gamma)?;
    let cert = certificate_from(&parts.l_next, lambda, None, None, false)?;
    Ok(DenseHidden {
        w: parts.w,
        b: fv.b.clone(),
        l_next: parts.l_next,
        cert,
    })
}

pub fn dense_last(fv: &DenseFreeVars, l_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    check_prev(l_prev)?;
    Ok((dense_last_with(&mut Eager, fv, l_prev)?, fv.b.clone()))
}

/// Assembles the certificate of a layer from its emitted factor `L` and
/// multipliers. `diagonal_q` marks a diagonal `L`, whose `Q = L²` is formed
/// entrywise so that it is exactly diagonal.
pub(crate) fn certificate_from(
    l_next: &Tensor,
    lambda: Tensor,
    p: Option<&Tensor>,
    f: Option<&Tensor>,
    diagonal_q: bool,
) -> Result<LayerCertificate> {
    let q = if diagonal_q {
        Tensor::diag_from(&l_next.diagonal().iter().map(|v| v * v).collect::<Vec<_>>())
    } else {
        l_next.t_matmul(l_next)?.symmetrized()
    };
    Ok(LayerCertificate {
        q,
        lambda,
        p: p.filter(|p| p.rows() > 0).map(Tensor::symmetrized),
        f: f.map(Tensor::symmetrized),
    })
}

fn finish_conv(parts: ConvParts<Tensor>, b: &Tensor, kernel_size: usize, diagonal_q: bool) -> Result<ConvLayer> {
    let cert = certificate_from(&parts.l_next, parts.lambda, Some(&parts.p), Some(&parts.f), diagonal_q)?;
    Ok(ConvLayer {
        kernels: kernels_from_c_hat(&parts.c_hat, kernel_size)?,
        c_hat: parts.c_hat,
        b: b.clone(),
        l_next: parts.l_next,
        cert,
    })
}

pub fn conv_layer(fv: &ConvFreeVars, l_prev: &Tensor, kernel_size: usize, eps: f64) -> Result<ConvLayer> {
    check_prev(l_prev)?;
    let parts = conv_layer_with(&mut Eager, fv, l_prev, kernel_size, eps)?;
    finish_conv(parts, &fv.b, kernel_size, false)
}

pub fn conv_layer_maxpool(fv: &ConvMaxFreeVars, l_prev: &Tensor, kernel_size: usize, eps: f64) -> Result<ConvLayer> {
    check_prev(l_prev)?;
    let parts = conv_maxpool_with(&mut Eager, fv, l_prev, kernel_size, eps)?;
    finish_conv(parts, &fv.b, kernel_size, true)
}

pub fn lipschitz_dense(y_tilde: &Tensor, rho: f64, b: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((lipschitz_dense_with(&mut Eager, y_tilde, rho)?, b.clone()))
}

pub fn lipschitz_conv(
    y_tilde: &Tensor,
    h: &Tensor,
    rho: f64,
    kernel_size: usize,
    eps: f64,
    b: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    let c_hat = lipschitz_conv_with(&mut Eager, y_tilde, h, rho, kernel_size, eps)?;
    Ok((kernels_from_c_hat(&c_hat, kernel_size)?, b.clone()))
}

fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

impl DenseFreeVars {
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, hidden: bool, rng: &mut R) -> Self {
        DenseFreeVars {
            y: randn(n_out, n_out, n_in, rng),
            z: randn(n_in, n_out, n_in, rng),
            gamma: hidden.then(|| Tensor::zeros(n_out, 1)),
            b: Tensor::zeros(n_out, 1),
        }
    }
}

impl ConvFreeVars {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel_size: usize, rng: &mut R) -> Self {
        let fan_in = kernel_size * c_in;
        let n_x = (kernel_size - 1) * c_in;
        ConvFreeVars {
            y: randn(c_out, c_out, fan_in, rng),
            z: randn(fan_in, c_out, fan_in, rng),
            h: randn(n_x, n_x, fan_in, rng),
            gamma: Tensor::zeros(c_out, 1),
            b: Tensor::zeros(c_out, 1),
        }
    }
}

impl ConvMaxFreeVars {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel_size: usize, rng: &mut R) -> Self {
        let fan_in = kernel_size * c_in;
        let n_x = (kernel_size - 1) * c_in;
        ConvMaxFreeVars {
            y_tilde: randn(fan_in, c_out, fan_in, rng),
            h: randn(n_x, n_x, fan_in, rng),
            gamma_tilde: Tensor::zeros(c_out, 1),
            l: Tensor::zeros(c_out, 1),
            b: Tensor::zeros(c_out, 1),
        }
    }
}

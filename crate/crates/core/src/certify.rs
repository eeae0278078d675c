//! Independent verification of the layer-wise LMIs and Lipschitz accounting.
//!
//! The checker never reuses the `F` matrices produced during
//! parameterization: each LMI is rebuilt from the weights, the shift
//! realization and the certificate matrices `(P, Λ, Q)`, and its smallest
//! eigenvalue is computed with the Jacobi solver.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{LayerSpec, LayerTheta, Materialized, Model, ModelConfig, Mode, Pool};
use crate::numerics::{min_eigenvalue_sym, spectral_norm, Tensor};
use crate::statespace::{shift_realization, Realization};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

fn require(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

fn check_diag_positive(lambda: &Tensor, n: usize, op: &'static str) -> Result<()> {
    require(lambda.shape() == (n, n) && lambda.is_diagonal(), op, || {
        format!("Λ must be diagonal {n}x{n}, got {:?}", lambda.shape())
    })?;
    if lambda.diagonal().iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::Config(format!("{op}: Λ has non-positive entries")));
    }
    Ok(())
}

/// ```text
/// [ P − AᵀPA    −AᵀPB          −CᵀΛ   ]
/// [ −BᵀPA       Q_prev − BᵀPB  −DᵀΛ   ]
/// [ −ΛC         −ΛD            2Λ − Q ]
/// ```
pub fn lmi_conv(r: &Realization, p: &Tensor, lambda: &Tensor, q_prev: &Tensor, q: &Tensor) -> Result<Tensor> {
    let (nx, c_in, c_out) = (r.state_dim(), r.c_in, r.c_out);
    require(p.shape() == (nx, nx), "lmi_conv", || format!("P {:?}, state dim {nx}", p.shape()))?;
    require(q_prev.shape() == (c_in, c_in), "lmi_conv", || {
        format!("Q_prev {:?}, c_in {c_in}", q_prev.shape())
    })?;
    require(q.shape() == (c_out, c_out), "lmi_conv", || format!("Q {:?}, c_out {c_out}", q.shape()))?;
    check_diag_positive(lambda, c_out, "lmi_conv")?;

    let pa = p.matmul(&r.a)?;
    let pb = p.matmul(&r.b)?;
    let b11 = p.sub(&r.a.t_matmul(&pa)?)?;
    let b12 = r.a.t_matmul(&pb)?.scale(-1.0);
    let b22 = q_prev.sub(&r.b.t_matmul(&pb)?)?;
    let lc = lambda.matmul(&r.c)?.scale(-1.0);
    let ld = lambda.matmul(&r.d)?.scale(-1.0);
    let b33 = lambda.scale(2.0).sub(q)?;

    let n = nx + c_in + c_out;
    let mut m = Tensor::zeros(n, n);
    m.set_block(0, 0, &b11);
    m.set_block(0, nx, &b12);
    m.set_block(nx, 0, &b12.transpose());
    m.set_block(nx, nx, &b22);
    m.set_block(nx + c_in, 0, &lc);
    m.set_block(0, nx + c_in, &lc.transpose());
    m.set_block(nx + c_in, nx, &ld);
    m.set_block(nx, nx + c_in, &ld.transpose());
    m.set_block(nx + c_in, nx + c_in, &b33);
    Ok(m)
}

/// `[[Q_prev, −WᵀΛ], [−ΛW, 2Λ − Q]]`.
pub fn lmi_dense(w: &Tensor, lambda: &Tensor, q_prev: &Tensor, q: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = w.shape();
    require(q_prev.shape() == (n_in, n_in) && q.shape() == (n_out, n_out), "lmi_dense", || {
        format!("W {:?}, Q_prev {:?}, Q {:?}", w.shape(), q_prev.shape(), q.shape())
    })?;
    check_diag_positive(lambda, n_out, "lmi_dense")?;
    let lw = lambda.matmul(w)?.scale(-1.0);
    let mut m = Tensor::zeros(n_in + n_out, n_in + n_out);
    m.set_block(0, 0, q_prev);
    m.set_block(n_in, 0, &lw);
    m.set_block(0, n_in, &lw.transpose());
    m.set_block(n_in, n_in, &lambda.scale(2.0).sub(q)?);
    Ok(m)
}

/// `[[Q_prev, −Wᵀ], [−W, I]]`.
pub fn lmi_last(w: &Tensor, q_prev: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = w.shape();
    require(q_prev.shape() == (n_in, n_in), "lmi_last", || {
        format!("W {:?}, Q_prev {:?}", w.shape(), q_prev.shape())
    })?;
    let mut m = Tensor::zeros(n_in + n_out, n_in + n_out);
    m.set_block(0, 0, q_prev);
    let nw = w.scale(-1.0);
    m.set_block(n_in, 0, &nw);
    m.set_block(0, n_in, &nw.transpose());
    m.set_block(n_in, n_in, &Tensor::eye(n_out));
    Ok(m)
}

/// Operator 2-norm of non-overlapping averaging over windows of `size`.
pub fn avg_pool_lipschitz(size: usize) -> f64 {
    (1.0 / size.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub min_eig: f64,
    #[serde(skip)]
    pub lmi: Tensor,
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub layers: Vec<LayerReport>,
    pub rho: f64,
    pub rho_tilde: f64,
    pub mu: Vec<f64>,
    pub rho_effective: f64,
    pub pass: bool,
    pub tolerance: f64,
}

impl Certificate {
    pub fn worst_min_eig(&self) -> f64 {
        self.layers.iter().map(|l| l.min_eig).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// Rebuilds every LMI of a lip-mode network from its weights and
/// certificate matrices.
pub fn certify_theta(config: &ModelConfig, theta: &Materialized, tolerance: f64) -> Result<Certificate> {
    let certs = theta.certificates.as_ref().ok_or(Error::ModeError)?;
    let shapes = config.shapes()?;
    let rho_tilde = config.rho_tilde();
    let mut q_prev = Tensor::eye(config.input_channels).scale(rho_tilde * rho_tilde);
    let mut len = config.input_length;
    let mut pending = Vec::new();
    for (i, ((layer, spec), shape)) in theta.layers.iter().zip(&config.layers).zip(&shapes).enumerate() {
        let missing = || Error::CertificateMismatch(format!("layer {i} has no certificate matrices"));
        let at = |e: Error| e.at_layer(i);
        match layer {
            LayerTheta::Flatten => {
                q_prev = q_prev.kron_eye(len);
                len = 1;
            }
            LayerTheta::Conv { bias, pool, .. } => {
                let cert = certs[i].as_ref().ok_or_else(missing)?;
                if matches!(pool, Pool::Max(_)) && !cert.q.is_diagonal() {
                    return Err(Error::CertificateMismatch(format!(
                        "layer {i} feeds a max pool but Q is not diagonal"
                    )));
                }
                let kernels = layer.kernels().ok_or_else(missing)?;
                let r = shift_realization(&kernels, bias).map_err(at)?;
                let p = cert.p.clone().unwrap_or_else(|| Tensor::zeros(0, 0));
                let lmi = lmi_conv(&r, &p, &cert.lambda, &q_prev, &cert.q).map_err(at)?;
                pending.push((i, spec.kind(), lmi));
                q_prev = cert.q.clone();
                len = shape.len_out;
            }
            LayerTheta::Dense { w, last, .. } => {
                if len > 1 {
                    q_prev = q_prev.kron_eye(len);
                    len = 1;
                }
                if *last {
                    pending.push((i, spec.kind(), lmi_last(w, &q_prev).map_err(at)?));
                } else {
                    let cert = certs[i].as_ref().ok_or_else(missing)?;
                    pending.push((i, spec.kind(), lmi_dense(w, &cert.lambda, &q_prev, &cert.q).map_err(at)?));
                    q_prev = cert.q.clone();
                }
            }
        }
    }
    let layers = pending
        .into_par_iter()
        .map(|(index, kind, lmi)| {
            Ok(LayerReport {
                index,
                kind: kind.to_string(),
                min_eig: min_eigenvalue_sym(&lmi).map_err(|e| e.at_layer(index))?,
                lmi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mu = config.pool_mus();
    let pass = layers.iter().all(|l| l.min_eig >= -tolerance);
    Ok(Certificate {
        layers,
        rho: config.rho,
        rho_tilde,
        rho_effective: rho_tilde * mu.iter().product::<f64>(),
        mu,
        pass,
        tolerance,
    })
}

pub fn certify_network(model: &Model, tolerance: f64) -> Result<Certificate> {
    if model.mode() != Mode::Lip {
        return Err(Error::ModeError);
    }
    certify_theta(model.config(), model.theta(), tolerance)
}

/// Matrix of a causal multi-channel convolution on signals of length `n`,
/// acting on time-major vectors: block `(t, s)` is `K_{t−s}`.
pub fn toeplitz(kernels: &[Tensor], n: usize) -> Result<Tensor> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::shape("toeplitz", "no kernels"))?;
    let (c_out, c_in) = first.shape();
    require(kernels.iter().all(|k| k.shape() == (c_out, c_in)), "toeplitz", || {
        "kernels differ in shape".into()
    })?;
    let mut m = Tensor::zeros(n * c_out, n * c_in);
    for t in 0..n {
        for (j, k) in kernels.iter().enumerate().take(t + 1) {
            m.set_block(t * c_out, (t - j) * c_in, k);
        }
    }
    Ok(m)
}

/// Product of per-layer operator norms (convolutions at the model's signal
/// lengths, average pools via `μ`, activations and max pools as 1).
pub fn product_bound(model: &Model) -> Result<f64> {
    let mut bound = 1.0;
    for ((layer, spec), shape) in model.theta().layers.iter().zip(&model.config().layers).zip(model.shapes()) {
        match layer {
            LayerTheta::Conv { .. } => {
                let kernels = layer
                    .kernels()
                    .ok_or_else(|| Error::shape("product_bound", "malformed convolution"))?;
                bound *= spectral_norm(&toeplitz(&kernels, shape.len_in)?);
                if let LayerSpec::ConvAvgpool { pool_size, .. } = spec {
                    bound *= avg_pool_lipschitz(*pool_size);
                }
            }
            LayerTheta::Flatten => {}
            LayerTheta::Dense { w, .. } => bound *= spectral_norm(w),
        }
    }
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerVars, DEFAULT_EPS};
    use crate::numerics::symmetric_eigenvalues;
    use crate::param::{conv_layer, conv_layer_maxpool, dense_hidden, ConvFreeVars, DenseFreeVars};
    use crate::statespace::{controllability_gramian, shift_matrices, GramianInputs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[allow(clippy::approx_constant)]
    fn avg_pool_constants_match_explicit_matrices() {
        for size in [1usize, 2, 4] {
            let m = Tensor::filled(1, size, 1.0 / size as f64);
            assert!((spectral_norm(&m) - avg_pool_lipschitz(size)).abs() <= 1e-12);
        }
        assert_eq!(avg_pool_lipschitz(2), 0.7071067811865476);
        assert_eq!(avg_pool_lipschitz(4), 0.5);
    }

    #[test]
    fn zero_weight_dense_lmi_is_block_diagonal() {
        let lmi = lmi_dense(&Tensor::zeros(2, 3), &Tensor::eye(2), &Tensor::eye(3), &Tensor::eye(2).scale(3.0)).unwrap();
        // 2Λ − Q = −I is not PSD.
        assert!((min_eigenvalue_sym(&lmi).unwrap() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn last_layer_min_eig_is_one_minus_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w = Tensor::randn(3, 4, 0.4, &mut rng);
        let sigma = spectral_norm(&w);
        let e = min_eigenvalue_sym(&lmi_last(&w, &Tensor::eye(4)).unwrap()).unwrap();
        assert!((e - (1.0 - sigma)).abs() <= 1e-9, "{e} vs {}", 1.0 - sigma);
    }

    #[test]
    fn empty_state_conv_lmi_equals_dense_lmi() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let d = Tensor::randn(2, 3, 1.0, &mut rng);
        let r = shift_realization(std::slice::from_ref(&d), &Tensor::zeros(2, 1)).unwrap();
        let lambda = Tensor::diag_from(&[1.5, 0.5]);
        let (qp, q) = (Tensor::eye(3).scale(2.0), Tensor::eye(2));
        let a = lmi_conv(&r, &Tensor::zeros(0, 0), &lambda, &qp, &q).unwrap();
        let b = lmi_dense(&d, &lambda, &qp, &q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weight_conv_lmi_splits_into_f_and_identity() {
        let (ell, c) = (3, 2);
        let (a, b) = shift_matrices(ell, c);
        let r = Realization {
            a,
            b,
            c: Tensor::zeros(c, (ell - 1) * c),
            d: Tensor::zeros(c, c),
            bias: Tensor::zeros(c, 1),
            kernel_size: ell,
            c_in: c,
            c_out: c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let inputs = GramianInputs {
            q_prev: Tensor::eye(c),
            h: Tensor::randn((ell - 1) * c, (ell - 1) * c, 1.0, &mut rng),
            eps: 1e-3,
        };
        let p = crate::numerics::inverse(&controllability_gramian(&r, &inputs).unwrap()).unwrap().symmetrized();
        let lmi = lmi_conv(&r, &p, &Tensor::eye(c), &Tensor::eye(c), &Tensor::eye(c)).unwrap();
        let f = crate::statespace::build_f(&r, &p, &Tensor::eye(c)).unwrap();
        let expected = symmetric_eigenvalues(&f).unwrap()[0].min(1.0);
        assert!((min_eigenvalue_sym(&lmi).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn parameterized_layers_satisfy_their_lmis() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let l_prev = Tensor::randn(3, 3, 1.0, &mut rng).add(&Tensor::eye(3).scale(2.0)).unwrap();
        let q_prev = l_prev.t_matmul(&l_prev).unwrap().symmetrized();
        let fv = ConvFreeVars::init(3, 2, 3, &mut rng);
        let layer = conv_layer(&fv, &l_prev, 3, DEFAULT_EPS).unwrap();
        let r = shift_realization(&layer.kernels, &layer.b).unwrap();
        let lmi = lmi_conv(&r, layer.cert.p.as_ref().unwrap(), &layer.cert.lambda, &q_prev, &layer.cert.q).unwrap();
        assert!(min_eigenvalue_sym(&lmi).unwrap() >= -1e-8);

        let dv = DenseFreeVars::init(3, 4, true, &mut rng);
        let d = dense_hidden(&dv, &l_prev).unwrap();
        let lmi = lmi_dense(&d.w, &d.cert.lambda, &q_prev, &d.cert.q).unwrap();
        assert!(min_eigenvalue_sym(&lmi).unwrap() >= -1e-8);
    }

    #[test]
    fn multiplied_weight_fails_certification() {
        let cfg = ModelConfig::reference(Mode::Lip, 10.0);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let cert = certify_network(&m, DEFAULT_TOLERANCE).unwrap();
        assert!(cert.pass);
        assert!((cert.rho_effective - 10.0).abs() <= 1e-12);
        assert_eq!(cert.layers.len(), 4);

        let mut theta = m.theta().clone();
        if let LayerTheta::Dense { w, .. } = &mut theta.layers[3] {
            w.data_mut()[0] *= 100.0;
        }
        assert!(!certify_theta(&cfg, &theta, DEFAULT_TOLERANCE).unwrap().pass);
    }

    #[test]
    fn vanilla_models_have_no_certificate() {
        let m = Model::new(ModelConfig::reference(Mode::Vanilla, 10.0), 1).unwrap();
        assert!(matches!(certify_network(&m, DEFAULT_TOLERANCE), Err(Error::ModeError)));
        assert!(product_bound(&m).unwrap() > 0.0);
    }

    #[test]
    fn unit_rho_last_layer_has_unit_norm_bound() {
        let cfg = ModelConfig {
            input_length: 1,
            input_channels: 4,
            layers: vec![LayerSpec::DenseLast { units: 3 }],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Lip,
        };
        let m = Model::new(cfg, 2).unwrap();
        assert!(certify_network(&m, DEFAULT_TOLERANCE).unwrap().pass);
        assert!(product_bound(&m).unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn identity_network_product_bound_is_one() {
        let cfg = ModelConfig {
            input_length: 3,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    kernel_size: 2,
                    channels: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::DenseLast { units: 3 },
            ],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Vanilla,
        };
        let vars = vec![
            LayerVars::RawConv {
                c_hat: Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
                b: Tensor::zeros(1, 1),
            },
            LayerVars::Flatten,
            LayerVars::RawDense {
                w: Tensor::eye(3),
                b: Tensor::zeros(3, 1),
            },
        ];
        let m = Model::from_vars(cfg, 0, vars).unwrap();
        assert!((product_bound(&m).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_first_layer_leaves_second_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let w1 = crate::cayley::cayley_stiefel(&Tensor::randn(4, 4, 1.0, &mut rng)).unwrap();
        let w2 = Tensor::randn(3, 4, 1.0, &mut rng);
        let cfg = ModelConfig {
            input_length: 1,
            input_channels: 4,
            layers: vec![LayerSpec::DenseHidden { units: 4 }, LayerSpec::DenseLast { units: 3 }],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Vanilla,
        };
        let vars = vec![
            LayerVars::RawDense {
                w: w1,
                b: Tensor::zeros(4, 1),
            },
            LayerVars::RawDense {
                w: w2.clone(),
                b: Tensor::zeros(3, 1),
            },
        ];
        let m = Model::from_vars(cfg, 0, vars).unwrap();
        assert!((product_bound(&m).unwrap() - spectral_norm(&w2)).abs() <= 1e-9);
    }

    #[test]
    fn toeplitz_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let ks: Vec<Tensor> = (0..3).map(|_| Tensor::randn(2, 2, 1.0, &mut rng)).collect();
        let x = Tensor::randn(2, 6, 1.0, &mut rng);
        let t = toeplitz(&ks, 6).unwrap();
        let y = t.matmul(&crate::network::flatten_time_major(&x)).unwrap();
        let r = shift_realization(&ks, &Tensor::zeros(2, 1)).unwrap();
        let sim = crate::statespace::simulate(&r, &x).unwrap();
        assert!(y.sub(&crate::network::flatten_time_major(&sim)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn max_pool_layers_need_diagonal_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let fv = crate::param::ConvMaxFreeVars::init(2, 3, 2, &mut rng);
        let layer = conv_layer_maxpool(&fv, &Tensor::eye(2), 2, DEFAULT_EPS).unwrap();
        assert!(layer.cert.q.is_diagonal());
    }

    #[test]
    fn certificate_json_has_expected_fields() {
        let m = Model::new(ModelConfig::reference(Mode::Lip, 5.0), 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&certify_network(&m, 1e-8).unwrap().to_json()).unwrap();
        for key in ["rho", "rho_tilde", "mu", "pass", "tolerance", "layers"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["layers"][0].get("min_eig").is_some());
        assert_eq!(v["layers"][0]["kind"], "conv_avgpool");
    }
}

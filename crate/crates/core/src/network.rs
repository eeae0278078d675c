//! Architecture description, materialization of free variables into
//! weights, forward inference and model files.
//!
//! A network is a stack of convolutional blocks, one flatten, zero or more
//! hidden dense layers and a final affine layer. Convolutions are causal
//! (front zero padding, output length equals input length) and followed by
//! ReLU and optional non-overlapping pooling. Flatten is time-major: entry
//! `t·c + ch` of the flattened vector is channel `ch` at time `t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::numerics::{Algebra, Eager, Graph, NodeId, Tensor};
use crate::param::{
    certificate_from, check_prev, conv_layer_with, conv_maxpool_with, dense_hidden_with, dense_last_with,
    ConvFreeVars, ConvMaxFreeVars, DenseFreeVars, LayerCertificate,
};
use crate::statespace::kernels_from_c_hat;

pub const MODEL_SIGNATURE: &str = "lipnet1d-model-v1";
pub const DEFAULT_EPS: f64 = 1e-6;
/// Largest tolerated deviation between stored and recomputed weights on load.
pub const THETA_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel_size: usize,
        channels: usize,
    },
    ConvMaxpool {
        kernel_size: usize,
        channels: usize,
        pool_size: usize,
    },
    ConvAvgpool {
        kernel_size: usize,
        channels: usize,
        pool_size: usize,
    },
    Flatten,
    DenseHidden {
        units: usize,
    },
    DenseLast {
        units: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvMaxpool { .. } => "conv_maxpool",
            LayerSpec::ConvAvgpool { .. } => "conv_avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::DenseHidden { .. } => "dense_hidden",
            LayerSpec::DenseLast { .. } => "dense_last",
        }
    }

    fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::ConvMaxpool { .. } | LayerSpec::ConvAvgpool { .. }
        )
    }

    fn pool(&self) -> Pool {
        match self {
            LayerSpec::ConvMaxpool { pool_size, .. } => Pool::Max(*pool_size),
            LayerSpec::ConvAvgpool { pool_size, .. } => Pool::Avg(*pool_size),
            _ => Pool::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    None,
    Max(usize),
    Avg(usize),
}

impl Pool {
    pub fn size(self) -> usize {
        match self {
            Pool::None => 1,
            Pool::Max(s) | Pool::Avg(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Parameterized, certified by construction.
    Lip,
    /// Raw weights, unconstrained.
    Vanilla,
    /// Raw weights with a weight-decay penalty during training.
    L2,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "lip" => Ok(Mode::Lip),
            "vanilla" => Ok(Mode::Vanilla),
            "l2" => Ok(Mode::L2),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_length: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub mode: Mode,
}

/// Input and output dimensions of one layer. Dense layers and flatten
/// outputs have length 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub len_out: usize,
}

impl ModelConfig {
    /// Two causal convolutions of kernel 3 with 2 and 3 channels, each
    /// followed by average pooling of size 2, then dense layers of 60 and 5
    /// units, for single-channel signals of length 128.
    pub fn reference(mode: Mode, rho: f64) -> ModelConfig {
        ModelConfig {
            input_length: 128,
            input_channels: 1,
            layers: vec![
                LayerSpec::ConvAvgpool {
                    kernel_size: 3,
                    channels: 2,
                    pool_size: 2,
                },
                LayerSpec::ConvAvgpool {
                    kernel_size: 3,
                    channels: 3,
                    pool_size: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::DenseHidden { units: 60 },
                LayerSpec::DenseLast { units: 5 },
            ],
            rho,
            eps: DEFAULT_EPS,
            mode,
        }
    }

    /// Checks the layer grammar and chains dimensions.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_length == 0 || self.input_channels == 0 {
            return bad("input length and channels must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        match self.layers.last() {
            Some(LayerSpec::DenseLast { .. }) => {}
            _ => return bad("the last layer must be dense_last".into()),
        }
        let n_conv = self.layers.iter().take_while(|l| l.is_conv()).count();
        let rest = &self.layers[n_conv..];
        let flatten = rest.iter().filter(|l| **l == LayerSpec::Flatten).count();
        if n_conv > 0 && (flatten != 1 || rest[0] != LayerSpec::Flatten) {
            return bad("convolutional layers must be followed by exactly one flatten".into());
        }
        if n_conv == 0 && flatten > 1 || (flatten == 1 && rest[0] != LayerSpec::Flatten) {
            return bad("flatten may appear only once, directly before the dense layers".into());
        }
        let dense = &rest[flatten..];
        if dense[..dense.len() - 1]
            .iter()
            .any(|l| !matches!(l, LayerSpec::DenseHidden { .. }))
        {
            return bad("only dense_hidden layers may precede dense_last".into());
        }

        let (mut c, mut len) = (self.input_channels, self.input_length);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let shape = match *spec {
                LayerSpec::Conv {
                    kernel_size,
                    channels,
                }
                | LayerSpec::ConvMaxpool {
                    kernel_size,
                    channels,
                    ..
                }
                | LayerSpec::ConvAvgpool {
                    kernel_size,
                    channels,
                    ..
                } => {
                    let pool = spec.pool().size();
                    if kernel_size == 0 || channels == 0 || pool == 0 {
                        return bad(format!("layer {i}: sizes must be positive"));
                    }
                    if len % pool != 0 {
                        return bad(format!("layer {i}: length {len} is not divisible by pool size {pool}"));
                    }
                    LayerShape {
                        c_in: c,
                        len_in: len,
                        c_out: channels,
                        len_out: len / pool,
                    }
                }
                LayerSpec::Flatten => LayerShape {
                    c_in: c,
                    len_in: len,
                    c_out: c * len,
                    len_out: 1,
                },
                LayerSpec::DenseHidden { units } | LayerSpec::DenseLast { units } => {
                    if units == 0 {
                        return bad(format!("layer {i}: units must be positive"));
                    }
                    LayerShape {
                        c_in: c * len,
                        len_in: 1,
                        c_out: units,
                        len_out: 1,
                    }
                }
            };
            c = shape.c_out;
            len = shape.len_out;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Lipschitz constants of the average pooling layers, in order.
    pub fn pool_mus(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::ConvAvgpool { pool_size, .. } => Some(certify::avg_pool_lipschitz(*pool_size)),
                _ => None,
            })
            .collect()
    }

    /// `ρ / Π μ_s`, the gain assigned to the input factor `L_0`.
    pub fn rho_tilde(&self) -> f64 {
        self.rho / self.pool_mus().iter().product::<f64>()
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::DenseLast { units }) => *units,
            _ => 0,
        }
    }
}

/// Trainable variables of one layer, generic over the matrix handle.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerVars<M = Tensor> {
    Conv(ConvFreeVars<M>),
    ConvMax(ConvMaxFreeVars<M>),
    Dense(DenseFreeVars<M>),
    /// Unconstrained convolution `Ĉ = [K_{ℓ−1} … K_0]` and bias.
    RawConv { c_hat: M, b: M },
    RawDense { w: M, b: M },
    Flatten,
}

const VECTOR_NAMES: [&str; 4] = ["gamma", "gamma_tilde", "l", "b"];

impl<M> LayerVars<M> {
    /// Named handles in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &M)> {
        match self {
            LayerVars::Conv(v) => vec![("Y", &v.y), ("Z", &v.z), ("H", &v.h), ("gamma", &v.gamma), ("b", &v.b)],
            LayerVars::ConvMax(v) => vec![
                ("Y_tilde", &v.y_tilde),
                ("H", &v.h),
                ("gamma_tilde", &v.gamma_tilde),
                ("l", &v.l),
                ("b", &v.b),
            ],
            LayerVars::Dense(v) => {
                let mut out = vec![("Y", &v.y), ("Z", &v.z)];
                if let Some(g) = &v.gamma {
                    out.push(("gamma", g));
                }
                out.push(("b", &v.b));
                out
            }
            LayerVars::RawConv { c_hat, b } => vec![("C_hat", c_hat), ("b", b)],
            LayerVars::RawDense { w, b } => vec![("W", w), ("b", b)],
            LayerVars::Flatten => vec![],
        }
    }

    /// Maps every handle, keeping the variant and names.
    pub fn try_map<N, E>(&self, mut f: impl FnMut(&'static str, &M) -> std::result::Result<N, E>) -> std::result::Result<LayerVars<N>, E> {
        Ok(match self {
            LayerVars::Conv(v) => LayerVars::Conv(ConvFreeVars {
                y: f("Y", &v.y)?,
                z: f("Z", &v.z)?,
                h: f("H", &v.h)?,
                gamma: f("gamma", &v.gamma)?,
                b: f("b", &v.b)?,
            }),
            LayerVars::ConvMax(v) => LayerVars::ConvMax(ConvMaxFreeVars {
                y_tilde: f("Y_tilde", &v.y_tilde)?,
                h: f("H", &v.h)?,
                gamma_tilde: f("gamma_tilde", &v.gamma_tilde)?,
                l: f("l", &v.l)?,
                b: f("b", &v.b)?,
            }),
            LayerVars::Dense(v) => LayerVars::Dense(DenseFreeVars {
                y: f("Y", &v.y)?,
                z: f("Z", &v.z)?,
                gamma: v.gamma.as_ref().map(|g| f("gamma", g)).transpose()?,
                b: f("b", &v.b)?,
            }),
            LayerVars::RawConv { c_hat, b } => LayerVars::RawConv {
                c_hat: f("C_hat", c_hat)?,
                b: f("b", b)?,
            },
            LayerVars::RawDense { w, b } => LayerVars::RawDense {
                w: f("W", w)?,
                b: f("b", b)?,
            },
            LayerVars::Flatten => LayerVars::Flatten,
        })
    }
}

impl LayerVars {
    /// Random initialization for one layer of the given mode.
    pub fn init<R: rand::Rng + ?Sized>(spec: &LayerSpec, shape: &LayerShape, mode: Mode, rng: &mut R) -> LayerVars {
        let kernel_size = match spec {
            LayerSpec::Conv { kernel_size, .. }
            | LayerSpec::ConvMaxpool { kernel_size, .. }
            | LayerSpec::ConvAvgpool { kernel_size, .. } => *kernel_size,
            _ => 1,
        };
        let (c_in, c_out) = (shape.c_in, shape.c_out);
        match (mode, spec) {
            (_, LayerSpec::Flatten) => LayerVars::Flatten,
            (Mode::Lip, LayerSpec::ConvMaxpool { .. }) => {
                LayerVars::ConvMax(ConvMaxFreeVars::init(c_in, c_out, kernel_size, rng))
            }
            (Mode::Lip, LayerSpec::Conv { .. } | LayerSpec::ConvAvgpool { .. }) => {
                LayerVars::Conv(ConvFreeVars::init(c_in, c_out, kernel_size, rng))
            }
            (Mode::Lip, LayerSpec::DenseHidden { .. }) => LayerVars::Dense(DenseFreeVars::init(c_in, c_out, true, rng)),
            (Mode::Lip, LayerSpec::DenseLast { .. }) => LayerVars::Dense(DenseFreeVars::init(c_in, c_out, false, rng)),
            (_, LayerSpec::DenseHidden { .. } | LayerSpec::DenseLast { .. }) => {
                let gain = if matches!(spec, LayerSpec::DenseHidden { .. }) { 2.0 } else { 1.0 };
                LayerVars::RawDense {
                    w: Tensor::randn(c_out, c_in, (gain / c_in as f64).sqrt(), rng),
                    b: Tensor::zeros(c_out, 1),
                }
            }
            (_, _) => {
                let fan_in = kernel_size * c_in;
                LayerVars::RawConv {
                    c_hat: Tensor::randn(c_out, fan_in, (2.0 / fan_in as f64).sqrt(), rng),
                    b: Tensor::zeros(c_out, 1),
                }
            }
        }
    }

    /// Shapes every variable of this layer must have.
    fn expected_shapes(spec: &LayerSpec, shape: &LayerShape, mode: Mode) -> LayerVars<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = LayerVars::init(spec, shape, mode, &mut rng);
        template
            .try_map::<_, std::convert::Infallible>(|_, t| Ok(t.shape()))
            .unwrap_or_else(|e| match e {})
    }
}

/// Materialized weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerTheta<M = Tensor> {
    Conv {
        /// `[K_{ℓ−1} … K_1 K_0]`, oldest lag first.
        c_hat: M,
        bias: M,
        kernel_size: usize,
        pool: Pool,
    },
    Flatten,
    Dense {
        w: M,
        bias: M,
        last: bool,
    },
}

impl LayerTheta {
    /// `K_0 … K_{ℓ−1}` of a convolution.
    pub fn kernels(&self) -> Option<Vec<Tensor>> {
        match self {
            LayerTheta::Conv { c_hat, kernel_size, .. } => kernels_from_c_hat(c_hat, *kernel_size).ok(),
            _ => None,
        }
    }
}

/// Weights plus, in lip mode, the certificate matrices of every layer that
/// carries an LMI (convolutions and hidden dense layers).
#[derive(Clone, Debug)]
pub struct Materialized {
    pub layers: Vec<LayerTheta>,
    pub certificates: Option<Vec<Option<LayerCertificate>>>,
    pub rho_tilde: f64,
}

struct CertParts<M> {
    l_next: M,
    lambda: M,
    p: Option<M>,
    f: Option<M>,
    diagonal_q: bool,
}

struct LayerOut<M> {
    theta: LayerTheta<M>,
    cert: Option<CertParts<M>>,
}

type PrevCheck<'a, A> = &'a dyn Fn(&A, &<A as Algebra>::Mat) -> Result<()>;

/// Walks the layers threading the factor `L`, starting from `L_0 = ρ̃ I`.
fn materialize_walk<A: Algebra>(
    alg: &mut A,
    config: &ModelConfig,
    shapes: &[LayerShape],
    vars: &[LayerVars<A::Mat>],
    check: PrevCheck<'_, A>,
) -> Result<Vec<LayerOut<A::Mat>>> {
    if vars.len() != config.layers.len() {
        return Err(Error::Config(format!(
            "{} variable sets for {} layers",
            vars.len(),
            config.layers.len()
        )));
    }
    let mut l = alg.constant(Tensor::eye(config.input_channels).scale(config.rho_tilde()));
    let mut len = config.input_length;
    let eps = config.eps;
    let mut out = Vec::with_capacity(vars.len());
    for (i, ((spec, shape), v)) in config.layers.iter().zip(shapes).zip(vars).enumerate() {
        let layer = (|| -> Result<LayerOut<A::Mat>> {
            let kernel_size = match spec {
                LayerSpec::Conv { kernel_size, .. }
                | LayerSpec::ConvMaxpool { kernel_size, .. }
                | LayerSpec::ConvAvgpool { kernel_size, .. } => *kernel_size,
                _ => 0,
            };
            let mismatch = || Error::Config(format!("variables do not match a {} layer", spec.kind()));
            Ok(match (spec, v) {
                (LayerSpec::Flatten, LayerVars::Flatten) => {
                    if config.mode == Mode::Lip {
                        l = alg.kron_eye(&l, len)?;
                    }
                    len = 1;
                    LayerOut {
                        theta: LayerTheta::Flatten,
                        cert: None,
                    }
                }
                (LayerSpec::Conv { .. } | LayerSpec::ConvAvgpool { .. }, LayerVars::Conv(fv)) => {
                    check(alg, &l)?;
                    let parts = conv_layer_with(alg, fv, &l, kernel_size, eps)?;
                    l = parts.l_next.clone();
                    len = shape.len_out;
                    LayerOut {
                        theta: LayerTheta::Conv {
                            c_hat: parts.c_hat,
                            bias: fv.b.clone(),
                            kernel_size,
                            pool: spec.pool(),
                        },
                        cert: Some(CertParts {
                            l_next: parts.l_next,
                            lambda: parts.lambda,
                            p: Some(parts.p),
                            f: Some(parts.f),
                            diagonal_q: false,
                        }),
                    }
                }
                (LayerSpec::ConvMaxpool { .. }, LayerVars::ConvMax(fv)) => {
                    check(alg, &l)?;
                    let parts = conv_maxpool_with(alg, fv, &l, kernel_size, eps)?;
                    l = parts.l_next.clone();
                    len = shape.len_out;
                    LayerOut {
                        theta: LayerTheta::Conv {
                            c_hat: parts.c_hat,
                            bias: fv.b.clone(),
                            kernel_size,
                            pool: spec.pool(),
                        },
                        cert: Some(CertParts {
                            l_next: parts.l_next,
                            lambda: parts.lambda,
                            p: Some(parts.p),
                            f: Some(parts.f),
                            diagonal_q: true,
                        }),
                    }
                }
                (LayerSpec::DenseHidden { .. } | LayerSpec::DenseLast { .. }, LayerVars::Dense(fv)) => {
                    if len > 1 {
                        // Dense layers read the time-major flattening of their input.
                        l = alg.kron_eye(&l, len)?;
                        len = 1;
                    }
                    check(alg, &l)?;
                    if matches!(spec, LayerSpec::DenseLast { .. }) {
                        let w = dense_last_with(alg, fv, &l)?;
                        LayerOut {
                            theta: LayerTheta::Dense {
                                w,
                                bias: fv.b.clone(),
                                last: true,
                            },
                            cert: None,
                        }
                    } else {
                        let parts = dense_hidden_with(alg, fv, &l)?;
                        let lambda = alg.matmul(&parts.gamma, &parts.gamma)?;
                        l = parts.l_next.clone();
                        LayerOut {
                            theta: LayerTheta::Dense {
                                w: parts.w,
                                bias: fv.b.clone(),
                                last: false,
                            },
                            cert: Some(CertParts {
                                l_next: parts.l_next,
                                lambda,
                                p: None,
                                f: None,
                                diagonal_q: false,
                            }),
                        }
                    }
                }
                (LayerSpec::Conv { .. } | LayerSpec::ConvMaxpool { .. } | LayerSpec::ConvAvgpool { .. }, LayerVars::RawConv { c_hat, b }) => {
                    LayerOut {
                        theta: LayerTheta::Conv {
                            c_hat: c_hat.clone(),
                            bias: b.clone(),
                            kernel_size,
                            pool: spec.pool(),
                        },
                        cert: None,
                    }
                }
                (LayerSpec::DenseHidden { .. } | LayerSpec::DenseLast { .. }, LayerVars::RawDense { w, b }) => LayerOut {
                    theta: LayerTheta::Dense {
                        w: w.clone(),
                        bias: b.clone(),
                        last: matches!(spec, LayerSpec::DenseLast { .. }),
                    },
                    cert: None,
                },
                _ => return Err(mismatch()),
            })
        })()
        .map_err(|e| e.at_layer(i))?;
        out.push(layer);
    }
    Ok(out)
}

/// Eager materialization with certificates (lip mode) or pass-through
/// weights (vanilla and l2 modes).
pub fn materialize(config: &ModelConfig, vars: &[LayerVars]) -> Result<Materialized> {
    let shapes = config.shapes()?;
    let check: PrevCheck<'_, Eager> = &|_, l| check_prev(l);
    let outs = materialize_walk(&mut Eager, config, &shapes, vars, check)?;
    let lip = config.mode == Mode::Lip;
    let mut layers = Vec::with_capacity(outs.len());
    let mut certs = Vec::with_capacity(outs.len());
    for (i, o) in outs.into_iter().enumerate() {
        let cert = o
            .cert
            .map(|c| certificate_from(&c.l_next, c.lambda, c.p.as_ref(), c.f.as_ref(), c.diagonal_q))
            .transpose()
            .map_err(|e| e.at_layer(i))?;
        layers.push(o.theta);
        certs.push(cert);
    }
    Ok(Materialized {
        layers,
        certificates: lip.then_some(certs),
        rho_tilde: config.rho_tilde(),
    })
}

/// Differentiable materialization on a tape.
pub fn materialize_graph(g: &mut Graph, config: &ModelConfig, vars: &[LayerVars<NodeId>]) -> Result<Vec<LayerTheta<NodeId>>> {
    let shapes = config.shapes()?;
    let check: PrevCheck<'_, Graph> = &|_, _| Ok(());
    Ok(materialize_walk(g, config, &shapes, vars, check)?
        .into_iter()
        .map(|o| o.theta)
        .collect())
}

fn shape_err(x: &Tensor, expected: (usize, usize)) -> Error {
    Error::shape("forward", format!("input {:?}, expected {expected:?}", x.shape()))
}

/// Causal convolution `y_k = b + Σ_j K_j x_{k−j}` computed tap by tap.
fn conv_direct(c_hat: &Tensor, bias: &Tensor, kernel_size: usize, x: &Tensor) -> Result<Tensor> {
    let (c_in, n) = x.shape();
    let c_out = c_hat.rows();
    if c_hat.cols() != kernel_size * c_in || bias.shape() != (c_out, 1) {
        return Err(Error::shape(
            "conv",
            format!("Ĉ {:?}, bias {:?}, input {:?}", c_hat.shape(), bias.shape(), x.shape()),
        ));
    }
    let mut y = Tensor::zeros(c_out, n);
    for o in 0..c_out {
        let row = c_hat.row(o);
        for k in 0..n {
            let mut acc = bias[(o, 0)];
            for j in 0..kernel_size.min(k + 1) {
                let block = &row[(kernel_size - 1 - j) * c_in..(kernel_size - j) * c_in];
                for (i, w) in block.iter().enumerate() {
                    acc += w * x[(i, k - j)];
                }
            }
            y[(o, k)] = acc;
        }
    }
    Ok(y)
}

pub(crate) fn flatten_time_major(x: &Tensor) -> Tensor {
    let n = x.len();
    x.transpose().reshape(n, 1).expect("same size")
}

/// Eager forward pass returning the logits as an `n_l × 1` column.
pub fn forward_theta(layers: &[LayerTheta], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in layers {
        h = match layer {
            LayerTheta::Conv {
                c_hat,
                bias,
                kernel_size,
                pool,
            } => {
                let y = conv_direct(c_hat, bias, *kernel_size, &h)?.map(|v| v.max(0.0));
                match pool {
                    Pool::None => y,
                    Pool::Avg(s) => crate::numerics::avg_pool(&y, *s)?,
                    Pool::Max(s) => crate::numerics::max_pool(&y, *s)?.0,
                }
            }
            LayerTheta::Flatten => flatten_time_major(&h),
            LayerTheta::Dense { w, bias, last } => {
                let v = if h.cols() == 1 { h } else { flatten_time_major(&h) };
                let z = w.matmul(&v)?.add(bias)?;
                if *last {
                    z
                } else {
                    z.map(|v| v.max(0.0))
                }
            }
        };
    }
    Ok(h)
}

/// Forward pass on a tape.
pub fn forward_graph(g: &mut Graph, layers: &[LayerTheta<NodeId>], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for layer in layers {
        h = match layer {
            LayerTheta::Conv {
                c_hat,
                bias,
                kernel_size,
                pool,
            } => {
                let lagged = g.lag_stack(h, *kernel_size)?;
                let lin = g.matmul(*c_hat, lagged)?;
                let y = g.add_col_broadcast(lin, *bias)?;
                let a = g.relu(y)?;
                match pool {
                    Pool::None => a,
                    Pool::Avg(s) => g.avg_pool(a, *s)?,
                    Pool::Max(s) => g.max_pool(a, *s)?,
                }
            }
            LayerTheta::Flatten => g.flatten_time_major(h)?,
            LayerTheta::Dense { w, bias, last } => {
                let v = if g.shape(h).1 == 1 { h } else { g.flatten_time_major(h)? };
                let lin = g.matmul(*w, v)?;
                let z = g.add(lin, *bias)?;
                if *last {
                    z
                } else {
                    g.relu(z)?
                }
            }
        };
    }
    Ok(h)
}

/// Configuration, free variables and the weights materialized from them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    shapes: Vec<LayerShape>,
    seed: u64,
    normalization: Option<Normalization>,
    vars: Vec<LayerVars>,
    theta: Materialized,
}

impl Model {
    /// Random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = config
            .layers
            .iter()
            .zip(&shapes)
            .map(|(spec, shape)| LayerVars::init(spec, shape, config.mode, &mut rng))
            .collect();
        Model::from_vars(config, seed, vars)
    }

    pub fn from_vars(config: ModelConfig, seed: u64, vars: Vec<LayerVars>) -> Result<Model> {
        let shapes = config.shapes()?;
        for (i, ((spec, shape), v)) in config.layers.iter().zip(&shapes).zip(&vars).enumerate() {
            let expected = LayerVars::expected_shapes(spec, shape, config.mode);
            let want = expected.named();
            let got = v.named();
            if want.len() != got.len()
                || want
                    .iter()
                    .zip(&got)
                    .any(|((wn, ws), (gn, gt))| wn != gn || **ws != gt.shape())
            {
                return Err(Error::Layer {
                    layer: i,
                    source: Box::new(Error::Config(format!("variables do not match a {} layer", spec.kind()))),
                });
            }
        }
        let theta = materialize(&config, &vars)?;
        Ok(Model {
            config,
            shapes,
            seed,
            normalization: None,
            vars,
            theta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, n: Option<Normalization>) {
        self.normalization = n;
    }

    pub fn vars(&self) -> &[LayerVars] {
        &self.vars
    }

    pub fn theta(&self) -> &Materialized {
        &self.theta
    }

    /// Replaces the free variables and re-materializes. On failure the model
    /// is left unchanged.
    pub fn set_vars(&mut self, vars: Vec<LayerVars>) -> Result<()> {
        let m = Model::from_vars(self.config.clone(), self.seed, vars)?;
        self.vars = m.vars;
        self.theta = m.theta;
        Ok(())
    }

    /// `(layer{i}.{name}, tensor)` for every free variable.
    pub fn named_vars(&self) -> Vec<(String, &Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.named().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    /// Places the free variables on a tape as leaves named like [`Model::named_vars`].
    pub fn vars_on_graph(&self, g: &mut Graph, trainable: bool) -> Vec<LayerVars<NodeId>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.try_map::<_, std::convert::Infallible>(|name, t| {
                    Ok(g.leaf(format!("layer{i}.{name}"), t.clone(), trainable))
                })
                .unwrap_or_else(|e| match e {})
            })
            .collect()
    }

    /// Places the cached weights on a tape as constants.
    pub fn theta_on_graph(&self, g: &mut Graph) -> Vec<LayerTheta<NodeId>> {
        self.theta
            .layers
            .iter()
            .map(|l| match l {
                LayerTheta::Conv {
                    c_hat,
                    bias,
                    kernel_size,
                    pool,
                } => LayerTheta::Conv {
                    c_hat: g.constant(c_hat.clone()),
                    bias: g.constant(bias.clone()),
                    kernel_size: *kernel_size,
                    pool: *pool,
                },
                LayerTheta::Flatten => LayerTheta::Flatten,
                LayerTheta::Dense { w, bias, last } => LayerTheta::Dense {
                    w: g.constant(w.clone()),
                    bias: g.constant(bias.clone()),
                    last: *last,
                },
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = (self.config.input_channels, self.config.input_length);
        if x.shape() != expected {
            return Err(shape_err(x, expected));
        }
        Ok(())
    }

    /// Logits for one (already normalized) signal.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        forward_theta(&self.theta.layers, x)
    }

    /// Logits for many signals, evaluated in parallel; results are in input order.
    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward(x)?.data()))
    }

    /// Fraction of correctly classified samples of an already normalized dataset.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let logits = self.forward_batch(&ds.signals)?;
        let correct = logits
            .iter()
            .zip(&ds.labels)
            .filter(|(z, l)| argmax(z.data()) == **l)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            signature: MODEL_SIGNATURE.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            normalization: self.normalization,
            layers: self
                .vars
                .iter()
                .zip(&self.theta.layers)
                .zip(&self.config.layers)
                .enumerate()
                .map(|(index, ((v, t), spec))| LayerFile {
                    index,
                    kind: spec.kind().to_string(),
                    vars: v
                        .named()
                        .into_iter()
                        .map(|(n, t)| (n.to_string(), Array::from_tensor(n, t)))
                        .collect(),
                    theta: ThetaFile::from_theta(t),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format {
            location: "model".into(),
            message: e.to_string(),
        })
    }

    /// The materialized weights alone, with the input gain and
    /// normalization needed to apply them outside this crate.
    pub fn theta_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export {
            input_length: usize,
            input_channels: usize,
            rho_tilde: f64,
            normalization: Option<Normalization>,
            layers: Vec<ExportLayer>,
        }
        #[derive(Serialize)]
        struct ExportLayer {
            index: usize,
            kind: String,
            #[serde(flatten)]
            theta: ThetaFile,
        }
        let export = Export {
            input_length: self.config.input_length,
            input_channels: self.config.input_channels,
            rho_tilde: self.theta.rho_tilde,
            normalization: self.normalization,
            layers: self
                .theta
                .layers
                .iter()
                .zip(&self.config.layers)
                .enumerate()
                .map(|(index, (t, spec))| ExportLayer {
                    index,
                    kind: spec.kind().to_string(),
                    theta: ThetaFile::from_theta(t),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&export).map_err(|e| Error::Format {
            location: "theta".into(),
            message: e.to_string(),
        })
    }

    /// Parses a model document, rebuilds the weights from the free
    /// variables, checks them against the stored weights and, in lip mode,
    /// re-verifies the certificate.
    pub fn from_json(text: &str) -> Result<Model> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
            location: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if file.signature != MODEL_SIGNATURE {
            return Err(Error::Format {
                location: "signature".into(),
                message: format!("expected {MODEL_SIGNATURE:?}, found {:?}", file.signature),
            });
        }
        let config = file.config;
        let shapes = config.shapes()?;
        if file.layers.len() != config.layers.len() {
            return Err(Error::Format {
                location: "layers".into(),
                message: format!("{} entries for {} layers", file.layers.len(), config.layers.len()),
            });
        }
        let mut vars = Vec::with_capacity(shapes.len());
        for (i, ((lf, spec), shape)) in file.layers.iter().zip(&config.layers).zip(&shapes).enumerate() {
            if lf.kind != spec.kind() || lf.index != i {
                return Err(Error::Format {
                    location: format!("layers[{i}].kind"),
                    message: format!("expected layer {i} of kind {}", spec.kind()),
                });
            }
            let expected = LayerVars::expected_shapes(spec, shape, config.mode);
            if lf.vars.len() != expected.named().len() {
                return Err(Error::Format {
                    location: format!("layers[{i}].vars"),
                    message: format!(
                        "expected variables {:?}",
                        expected.named().iter().map(|(n, _)| *n).collect::<Vec<_>>()
                    ),
                });
            }
            vars.push(expected.try_map(|name, &shape| {
                let loc = format!("layers[{i}].vars.{name}");
                let arr = lf.vars.get(name).ok_or_else(|| Error::Format {
                    location: loc.clone(),
                    message: "missing".into(),
                })?;
                arr.to_tensor(shape).map_err(|message| Error::Format { location: loc, message })
            })?);
        }
        let mut model = Model::from_vars(config, file.seed, vars)?;
        model.normalization = file.normalization;
        for (i, (lf, t)) in file.layers.iter().zip(&model.theta.layers).enumerate() {
            let dev = lf.theta.deviation(t).map_err(|message| Error::Format {
                location: format!("layers[{i}].theta"),
                message,
            })?;
            if dev > THETA_TOLERANCE {
                return Err(Error::CertificateMismatch(format!(
                    "layer {i}: stored weights differ from the free variables by {dev:e}"
                )));
            }
        }
        if model.mode() == Mode::Lip {
            let cert = certify::certify_network(&model, certify::DEFAULT_TOLERANCE)?;
            if !cert.pass {
                return Err(Error::CertificateMismatch(format!(
                    "certificate fails (worst min eigenvalue {:e})",
                    cert.worst_min_eig()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Model::from_json(&text)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    signature: String,
    config: ModelConfig,
    seed: u64,
    normalization: Option<Normalization>,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    index: usize,
    kind: String,
    vars: BTreeMap<String, Array>,
    theta: ThetaFile,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Array {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

impl Array {
    fn from_tensor(name: &str, t: &Tensor) -> Array {
        if VECTOR_NAMES.contains(&name) && t.cols() == 1 {
            Array::Vector(t.data().to_vec())
        } else {
            Array::Matrix(t.to_rows())
        }
    }

    fn to_tensor(&self, (rows, cols): (usize, usize)) -> std::result::Result<Tensor, String> {
        let wrong = |found: String| format!("expected {rows}x{cols}, found {found}");
        match self {
            Array::Vector(v) if cols == 1 && v.len() == rows => Ok(Tensor::column(v)),
            Array::Vector(v) => Err(wrong(format!("a list of {}", v.len()))),
            Array::Matrix(m) if m.is_empty() && rows == 0 => Ok(Tensor::zeros(0, cols)),
            Array::Matrix(m) => {
                if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                    return Err(wrong(format!("{} rows", m.len())));
                }
                Tensor::from_rows(m).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ThetaFile {
    /// `K_0 … K_{ℓ−1}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<String>,
}

impl ThetaFile {
    pub(crate) fn from_theta(t: &LayerTheta) -> ThetaFile {
        match t {
            LayerTheta::Conv { bias, pool, .. } => ThetaFile {
                kernels: t.kernels().map(|ks| ks.iter().map(Tensor::to_rows).collect()),
                bias: Some(bias.data().to_vec()),
                pool: match pool {
                    Pool::None => None,
                    Pool::Max(s) => Some(format!("max{s}")),
                    Pool::Avg(s) => Some(format!("avg{s}")),
                },
                ..ThetaFile::default()
            },
            LayerTheta::Flatten => ThetaFile::default(),
            LayerTheta::Dense { w, bias, .. } => ThetaFile {
                weight: Some(w.to_rows()),
                bias: Some(bias.data().to_vec()),
                ..ThetaFile::default()
            },
        }
    }

    /// Largest absolute difference to `t`; an error if the structure differs.
    fn deviation(&self, t: &LayerTheta) -> std::result::Result<f64, String> {
        let expected = ThetaFile::from_theta(t);
        let flat = |f: &ThetaFile| -> Vec<f64> {
            let mut v = Vec::new();
            for k in f.kernels.iter().flatten().flatten() {
                v.extend_from_slice(k);
            }
            for r in f.weight.iter().flatten() {
                v.extend_from_slice(r);
            }
            v.extend(f.bias.iter().flatten());
            v
        };
        let shape = |f: &ThetaFile| {
            (
                f.kernels.as_ref().map(|k| k.iter().map(|m| m.iter().map(Vec::len).collect::<Vec<_>>()).collect::<Vec<_>>()),
                f.weight.as_ref().map(|m| m.iter().map(Vec::len).collect::<Vec<_>>()),
                f.bias.as_ref().map(Vec::len),
                f.pool.clone(),
            )
        };
        if shape(self) != shape(&expected) {
            return Err("weights do not match the layer structure".into());
        }
        Ok(flat(self)
            .iter()
            .zip(flat(&expected))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

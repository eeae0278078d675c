//! Mini-batch training over the free variables.
//!
//! In lip mode each step differentiates through the whole materialization
//! (Cayley transforms, Gramians, Cholesky factors), so any update of the free
//! variables yields weights that are again certified. Vanilla and l2 modes
//! train the weights directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::certify::{certify_network, DEFAULT_TOLERANCE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax, forward_graph, materialize_graph, LayerTheta, Mode, Model};
use crate::numerics::{eval_and_grad, Graph, Tensor};

pub use crate::numerics::cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Weight of `Σ‖θ‖²_F`, used in l2 mode only.
    pub l2_gamma: f64,
    pub seed: u64,
    /// Certify (lip mode) and optionally save every this many epochs; the
    /// final epoch is always a checkpoint. Zero disables intermediate ones.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            l2_gamma: 0.0,
            seed: 0,
            checkpoint_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.l2_gamma >= 0.0 && self.l2_gamma.is_finite()) {
            return Err(Error::Config(format!("invalid l2 weight {}", self.l2_gamma)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::Config("invalid Adam hyperparameters".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `NaN` when no test set was given.
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    /// `None` outside lip mode.
    pub certified: Option<bool>,
    pub worst_min_eig: Option<f64>,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,test_acc\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_acc, r.test_acc));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Trains `model` on `train` (already normalized) and returns the updated
/// model with its history. Gradients are averaged over each batch.
pub fn train(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Model, History)> {
    cfg.validate()?;
    let expected = (model.config().input_channels, model.config().input_length);
    if train.signal_shape().is_some_and(|s| s != expected) {
        return Err(Error::shape("train", format!("signals {:?}, model expects {expected:?}", train.signal_shape())));
    }
    if train.labels.iter().any(|l| *l >= model.config().num_classes()) {
        return Err(Error::Config("labels exceed the number of model outputs".into()));
    }
    let mut model = model.clone();
    let mut history = History::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (loss, hits, grads) = batch_gradient(&model, train, batch, cfg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            loss_sum += loss * batch.len() as f64;
            correct += hits;
            apply_update(&mut model, &grads, &mut moments, cfg, step)?;
        }
        let n = train.len().max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc: test.map(|t| model.accuracy(t)).transpose()?.unwrap_or(f64::NAN),
        });
        let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if due || epoch == cfg.epochs {
            history.checkpoints.push(checkpoint(&model, epoch, cfg.checkpoint_dir.as_deref())?);
        }
    }
    Ok((model, history))
}

fn checkpoint(model: &Model, epoch: usize, dir: Option<&Path>) -> Result<CheckpointRecord> {
    let (certified, worst) = if model.mode() == Mode::Lip {
        let cert = certify_network(model, DEFAULT_TOLERANCE)?;
        (Some(cert.pass), Some(cert.worst_min_eig()))
    } else {
        (None, None)
    };
    let path = dir
        .map(|d| {
            let p = d.join(format!("checkpoint_epoch{epoch:04}.json"));
            model.save(&p).map(|_| p)
        })
        .transpose()?;
    Ok(CheckpointRecord {
        epoch,
        certified,
        worst_min_eig: worst,
        path,
    })
}

/// Mean loss, number of correct predictions and mean gradients of one batch.
fn batch_gradient(
    model: &Model,
    ds: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let vars = model.vars_on_graph(&mut g, true);
    let theta = materialize_graph(&mut g, model.config(), &vars)?;
    let mut total = None;
    let mut hits = 0;
    for &i in batch {
        let x = g.constant(ds.signals[i].clone());
        let logits = forward_graph(&mut g, &theta, x)?;
        if argmax(g.value(logits).data()) == ds.labels[i] {
            hits += 1;
        }
        let ce = g.softmax_cross_entropy(logits, ds.labels[i])?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let mean = g.scale(total, 1.0 / batch.len() as f64)?;
    let data_loss = g.value(mean)[(0, 0)];
    let objective = if model.mode() == Mode::L2 && cfg.l2_gamma > 0.0 {
        let mut penalty = None;
        for layer in &theta {
            let parts = match layer {
                LayerTheta::Conv { c_hat, bias, .. } => vec![*c_hat, *bias],
                LayerTheta::Dense { w, bias, .. } => vec![*w, *bias],
                LayerTheta::Flatten => vec![],
            };
            for p in parts {
                let s = g.sum_squares(p)?;
                penalty = Some(match penalty {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
        }
        match penalty {
            Some(p) => {
                let weighted = g.scale(p, cfg.l2_gamma)?;
                g.add(mean, weighted)?
            }
            None => mean,
        }
    } else {
        mean
    };
    let (objective_value, grads) = eval_and_grad(&g, objective)?;
    let loss = if objective_value.is_finite() { data_loss } else { objective_value };
    Ok((loss, hits, grads))
}

fn apply_update(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    moments: &mut BTreeMap<String, Moments>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let lr = cfg.learning_rate;
    let vars = model
        .vars()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.try_map(|name, t| -> Result<Tensor> {
                let key = format!("layer{i}.{name}");
                let g = grads
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("missing gradient for {key}")))?;
                Ok(match cfg.optimizer {
                    Optimizer::Sgd => t.sub(&g.scale(lr))?,
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let mo = moments.entry(key).or_insert_with(|| Moments {
                            m: Tensor::zeros(t.rows(), t.cols()),
                            v: Tensor::zeros(t.rows(), t.cols()),
                        });
                        mo.m = mo.m.scale(beta1).add(&g.scale(1.0 - beta1))?;
                        mo.v = mo.v.scale(beta2).add(&g.hadamard(g)?.scale(1.0 - beta2))?;
                        let c1 = 1.0 - beta1.powi(step as i32);
                        let c2 = 1.0 - beta2.powi(step as i32);
                        let mut out = t.clone();
                        for ((o, m), v) in out.data_mut().iter_mut().zip(mo.m.data()).zip(mo.v.data()) {
                            *o -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                        }
                        out
                    }
                })
            })
        })
        .collect::<Result<Vec<_>>>()?;
    model.set_vars(vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, split, synth};
    use crate::network::{LayerSpec, ModelConfig, DEFAULT_EPS};

    fn tiny_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            input_length: 128,
            input_channels: 1,
            layers: vec![
                LayerSpec::ConvAvgpool {
                    kernel_size: 3,
                    channels: 2,
                    pool_size: 4,
                },
                LayerSpec::Flatten,
                LayerSpec::DenseHidden { units: 8 },
                LayerSpec::DenseLast { units: 5 },
            ],
            rho: 10.0,
            eps: DEFAULT_EPS,
            mode,
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0; 5], 2) - 5f64.ln()).abs() <= 1e-12);
        assert!(cross_entropy(&[30.0, 0.0, 0.0, 0.0, 0.0], 0) <= 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let ds = synth(20, 1);
        let m = Model::new(tiny_config(Mode::Lip), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&m, &ds, None, &cfg).unwrap();
        assert_eq!(trained.vars(), m.vars());
        assert_eq!(trained.to_json().unwrap(), m.to_json().unwrap());
    }

    #[test]
    fn logistic_bias_converges_to_log_odds() {
        // Zero inputs leave only the biases; the optimum puts probability
        // 1/4 on class 1, so b₁ − b₀ = ln(1/3).
        let cfg = ModelConfig {
            input_length: 1,
            input_channels: 1,
            layers: vec![LayerSpec::DenseLast { units: 2 }],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Vanilla,
        };
        let m = Model::new(cfg, 0).unwrap();
        let ds = Dataset::new(vec![Tensor::zeros(1, 1); 4], vec![0, 0, 0, 1]).unwrap();
        let tc = TrainConfig {
            epochs: 400,
            batch_size: 4,
            learning_rate: 2.0,
            optimizer: Optimizer::Sgd,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&m, &ds, None, &tc).unwrap();
        let b = trained.vars()[0].named()[1].1.clone();
        assert!((b[(1, 0)] - b[(0, 0)] - (1.0f64 / 3.0).ln()).abs() <= 1e-4);
        let optimum = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((history.epochs.last().unwrap().train_loss - optimum).abs() <= 1e-8);
    }

    #[test]
    fn lip_training_keeps_certificates_and_reduces_loss() {
        let (ds, _) = normalize(&synth(100, 2));
        let (tr, te) = split(&ds, 0.8, 2).unwrap();
        let m = Model::new(tiny_config(Mode::Lip), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&m, &tr, Some(&te), &cfg).unwrap();
        assert_eq!(history.epochs.len(), 4);
        assert_eq!(history.checkpoints.len(), 4);
        assert!(history.checkpoints.iter().all(|c| c.certified == Some(true)));
        assert!(history.epochs[3].train_loss < history.epochs[0].train_loss);
        assert_ne!(trained.vars(), m.vars());
        assert!(history.to_csv().starts_with("epoch,train_loss,train_acc,test_acc\n1,"));
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_are_written() {
        let ds = normalize(&synth(30, 3)).0;
        let m = Model::new(tiny_config(Mode::L2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            l2_gamma: 1e-3,
            checkpoint_every: 1,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let (a, ha) = train(&m, &ds, None, &cfg).unwrap();
        let (b, hb) = train(&m, &ds, None, &cfg).unwrap();
        assert_eq!(ha.to_csv(), hb.to_csv());
        assert_eq!(a.vars(), b.vars());
        let p = ha.checkpoints[1].path.as_ref().unwrap();
        assert_eq!(Model::load(p).unwrap().vars(), a.vars());
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let ds = Dataset::new(vec![Tensor::filled(1, 1, 1e300); 2], vec![0, 1]).unwrap();
        let cfg = ModelConfig {
            input_length: 1,
            input_channels: 1,
            layers: vec![LayerSpec::DenseLast { units: 2 }],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Vanilla,
        };
        let m = Model::new(cfg, 1).unwrap();
        let m = {
            let mut m = m;
            let vars = vec![crate::network::LayerVars::RawDense {
                w: Tensor::from_rows(&[vec![1e10], vec![-1e10]]).unwrap(),
                b: Tensor::zeros(2, 1),
            }];
            m.set_vars(vars).unwrap();
            m
        };
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&m, &ds, None, &tc), Err(Error::NonFiniteLoss { step: 1 })));
    }
}

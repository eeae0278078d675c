//! L2 projected gradient attacks, robust accuracy curves and empirical
//! Lipschitz lower bounds.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax, forward_graph, Model};
use crate::numerics::{spectral_norm, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub eps: f64,
    pub steps: usize,
    /// Defaults to `2.5 ε / steps`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(eps: f64) -> AttackConfig {
        AttackConfig {
            eps,
            steps: 40,
            step_size: None,
            restarts: 1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("attack budget must be nonnegative, got {}", self.eps)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("attack steps and restarts must be positive".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step size must be positive, got {s}")));
            }
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.eps / self.steps as f64)
    }
}

/// Loss and input gradient of one model on a reusable tape.
struct InputTape {
    graph: Graph,
    x: NodeId,
    logits: NodeId,
    loss: Option<NodeId>,
}

impl InputTape {
    fn new(model: &Model, x0: &Tensor, label: Option<usize>) -> Result<InputTape> {
        let mut graph = Graph::new();
        let theta = model.theta_on_graph(&mut graph);
        let x = graph.trainable("x", x0.clone());
        let logits = forward_graph(&mut graph, &theta, x)?;
        let loss = label.map(|l| graph.softmax_cross_entropy(logits, l)).transpose()?;
        Ok(InputTape {
            graph,
            x,
            logits,
            loss,
        })
    }

    fn set_input(&mut self, x: &Tensor) -> Result<()> {
        self.graph.set_leaf(self.x, x.clone())?;
        self.graph.recompute()
    }

    fn loss(&self) -> f64 {
        self.loss.map_or(0.0, |l| self.graph.value(l)[(0, 0)])
    }

    fn prediction(&self) -> usize {
        argmax(self.graph.value(self.logits).data())
    }

    fn input_gradient(&self, node: NodeId) -> Result<Tensor> {
        let adj = self.graph.backward(node)?;
        let (r, c) = self.graph.shape(self.x);
        Ok(adj.get(self.x).cloned().unwrap_or_else(|| Tensor::zeros(r, c)))
    }
}

/// Outcome of an attack on one sample.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub loss: f64,
    pub clean_loss: f64,
    /// Whether any visited point (including the start) was misclassified.
    pub fooled: bool,
}

fn project(x0: &Tensor, x: &Tensor, eps: f64) -> Tensor {
    let delta = x.sub(x0).expect("same shape");
    let norm = delta.frobenius_norm();
    if norm <= eps {
        x.clone()
    } else {
        x0.add(&delta.scale(eps / norm)).expect("same shape")
    }
}

/// Maximizes cross-entropy within the L2 ball of radius `ε` around `x0`
/// with normalized gradient steps; keeps the best point over all restarts.
/// Restarts after the first begin at a uniformly random point of the ball.
pub fn pgd_attack(model: &Model, x0: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut tape = InputTape::new(model, x0, Some(label))?;
    let clean_loss = tape.loss();
    let mut best = AttackResult {
        x_adv: x0.clone(),
        loss: clean_loss,
        clean_loss,
        fooled: tape.prediction() != label,
    };
    if cfg.eps == 0.0 {
        return Ok(best);
    }
    let loss_node = tape.loss.expect("loss present");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha = cfg.step();
    for restart in 0..cfg.restarts {
        let mut x = if restart == 0 {
            x0.clone()
        } else {
            let dir = Tensor::randn(x0.rows(), x0.cols(), 1.0, &mut rng);
            let radius = cfg.eps * rng.gen::<f64>().powf(1.0 / x0.len() as f64);
            let n = dir.frobenius_norm().max(f64::MIN_POSITIVE);
            x0.add(&dir.scale(radius / n))?
        };
        tape.set_input(&x)?;
        for _ in 0..cfg.steps {
            let g = tape.input_gradient(loss_node)?;
            let gn = g.frobenius_norm();
            if gn == 0.0 || !gn.is_finite() {
                break;
            }
            x = project(x0, &x.add(&g.scale(alpha / gn))?, cfg.eps);
            tape.set_input(&x)?;
            best.fooled |= tape.prediction() != label;
            if tape.loss() > best.loss {
                best.loss = tape.loss();
                best.x_adv = x.clone();
            }
        }
    }
    Ok(best)
}

pub fn pgd_l2(model: &Model, x0: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    Ok(pgd_attack(model, x0, label, cfg)?.x_adv)
}

/// Accuracy under attack at each budget. A sample counts as correct when no
/// point visited by the attack is misclassified, so the `ε = 0` entry is the
/// clean accuracy. Samples are attacked in parallel with per-sample seeds.
pub fn robust_accuracy_curve(model: &Model, ds: &Dataset, eps_list: &[f64], cfg: &AttackConfig) -> Result<Vec<(f64, f64)>> {
    eps_list
        .iter()
        .map(|&eps| {
            let outcomes = (0..ds.len())
                .into_par_iter()
                .map(|i| {
                    let c = AttackConfig {
                        eps,
                        seed: cfg.seed.wrapping_add(i as u64),
                        ..*cfg
                    };
                    Ok(!pgd_attack(model, &ds.signals[i], ds.labels[i], &c)?.fooled)
                })
                .collect::<Result<Vec<bool>>>()?;
            let correct = outcomes.iter().filter(|c| **c).count();
            Ok((eps, if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 }))
        })
        .collect()
}

pub fn write_curve_csv(curve: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    let mut text = String::from("epsilon,accuracy\n");
    for (e, a) in curve {
        text.push_str(&format!("{e},{a}\n"));
    }
    f.write_all(text.as_bytes()).map_err(io)
}

/// Input–output Jacobian at `x`, one reverse pass per output.
pub fn jacobian(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut tape = InputTape::new(model, x, None)?;
    let n_out = tape.graph.shape(tape.logits).0;
    let mut rows = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let logits = tape.logits;
        let out = tape.graph.slice(logits, k..k + 1, 0..1)?;
        rows.push(tape.input_gradient(out)?.into_data());
    }
    Tensor::from_rows(&rows)
}

/// Largest observed local gain: explicit Jacobian norms at dataset points
/// refined by random local search, and output/input distance ratios of
/// nearby and dataset pairs. Every candidate is a valid lower bound on the
/// Lipschitz constant.
pub fn empirical_lipschitz_lb(model: &Model, ds: &Dataset, iters: usize, seed: u64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config("empirical bound needs at least one sample".into()));
    }
    let points = iters.max(1);
    let best = (0..points)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let x = &ds.signals[rng.gen_range(0..ds.len())];
            let scale = (x.frobenius_norm() / (x.len() as f64).sqrt()).max(1e-3);

            let mut here = x.clone();
            let mut best = spectral_norm(&jacobian(model, &here)?);
            for _ in 0..4 {
                let cand = here.add(&Tensor::randn(x.rows(), x.cols(), 0.1 * scale, &mut rng))?;
                let s = spectral_norm(&jacobian(model, &cand)?);
                if s > best {
                    best = s;
                    here = cand;
                }
            }

            let fx = model.forward(x)?;
            for r in [1e-4, 1e-2, 1.0] {
                let d = Tensor::randn(x.rows(), x.cols(), 1.0, &mut rng);
                let dn = d.frobenius_norm();
                if dn == 0.0 {
                    continue;
                }
                let y = x.add(&d.scale(r * scale / dn))?;
                best = best.max(ratio(model, x, &fx, &y)?);
            }
            let other = &ds.signals[rng.gen_range(0..ds.len())];
            if other != x {
                best = best.max(ratio(model, x, &fx, other)?);
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(best.into_iter().fold(0.0, f64::max))
}

fn ratio(model: &Model, x: &Tensor, fx: &Tensor, y: &Tensor) -> Result<f64> {
    let din = x.sub(y)?.frobenius_norm();
    if din == 0.0 {
        return Ok(0.0);
    }
    Ok(fx.sub(&model.forward(y)?)?.frobenius_norm() / din)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, LayerVars, ModelConfig, Mode, DEFAULT_EPS};

    fn linear_model(w: Tensor) -> Model {
        let (n_out, n_in) = w.shape();
        let cfg = ModelConfig {
            input_length: 1,
            input_channels: n_in,
            layers: vec![LayerSpec::DenseLast { units: n_out }],
            rho: 1.0,
            eps: DEFAULT_EPS,
            mode: Mode::Vanilla,
        };
        Model::from_vars(
            cfg,
            0,
            vec![LayerVars::RawDense {
                w,
                b: Tensor::zeros(n_out, 1),
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_returns_input() {
        let m = Model::new(ModelConfig::reference(Mode::Lip, 10.0), 1).unwrap();
        let ds = crate::data::synth(5, 1);
        let x = pgd_l2(&m, &ds.signals[0], 0, &AttackConfig::new(0.0)).unwrap();
        assert_eq!(x, ds.signals[0]);
    }

    #[test]
    fn linear_model_reaches_closed_form_worst_case() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![-0.5, 1.0, 2.0]]).unwrap();
        let m = linear_model(w.clone());
        let x0 = Tensor::column(&[0.3, -0.1, 0.2]);
        let eps = 0.7;
        let x = pgd_l2(&m, &x0, 0, &AttackConfig::new(eps)).unwrap();
        // The loss grows along d = w_1 − w_0 for label 0.
        let d: Vec<f64> = (0..3).map(|j| w[(1, j)] - w[(0, j)]).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((x[(j, 0)] - (x0[(j, 0)] + eps * d[j] / dn)).abs() <= 1e-4);
        }
    }

    #[test]
    fn attacks_stay_in_ball_and_never_lose() {
        let m = Model::new(ModelConfig::reference(Mode::Vanilla, 1.0), 2).unwrap();
        let ds = crate::data::synth(5, 2);
        for eps in [0.5, 3.0] {
            let mut cfg = AttackConfig::new(eps);
            cfg.restarts = 2;
            cfg.steps = 10;
            for (x, l) in ds.signals.iter().zip(&ds.labels) {
                let r = pgd_attack(&m, x, *l, &cfg).unwrap();
                assert!(r.x_adv.sub(x).unwrap().frobenius_norm() <= eps * (1.0 + 1e-12));
                assert!(r.loss >= r.clean_loss - 1e-12);
                let again = pgd_attack(&m, x, *l, &cfg).unwrap();
                assert_eq!(again.x_adv, r.x_adv);
            }
        }
    }

    #[test]
    fn zero_budget_curve_entry_is_clean_accuracy() {
        let m = Model::new(ModelConfig::reference(Mode::Lip, 10.0), 3).unwrap();
        let ds = crate::data::synth(10, 3);
        let curve = robust_accuracy_curve(&m, &ds, &[0.0, 1.0], &AttackConfig::new(0.0)).unwrap();
        assert_eq!(curve[0], (0.0, m.accuracy(&ds).unwrap()));
        assert!(curve[1].1 <= curve[0].1);
    }

    #[test]
    fn curve_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curve_csv(&[(0.0, 0.9), (2.0, 0.5)], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "epsilon,accuracy\n0,0.9\n2,0.5\n");
    }

    #[test]
    fn linear_lower_bound_is_the_spectral_norm() {
        let w = Tensor::from_rows(&[vec![3.0, 1.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let m = linear_model(w.clone());
        let ds = Dataset::new(vec![Tensor::column(&[1.0, 0.0]), Tensor::column(&[0.0, 1.0])], vec![0, 1]).unwrap();
        let lb = empirical_lipschitz_lb(&m, &ds, 4, 0).unwrap();
        assert!((lb - spectral_norm(&w)).abs() <= 1e-6, "{lb}");
        let id = linear_model(Tensor::eye(2));
        assert!((empirical_lipschitz_lb(&id, &ds, 2, 0).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = Model::new(ModelConfig::reference(Mode::Lip, 5.0), 4).unwrap();
        let x = crate::data::synth(1, 4).signals[0].clone();
        let j = jacobian(&m, &x).unwrap();
        let h = 1e-6;
        for t in [0usize, 40, 127] {
            let mut xp = x.clone();
            xp[(0, t)] += h;
            let mut xm = x.clone();
            xm[(0, t)] -= h;
            let fd = m.forward(&xp).unwrap().sub(&m.forward(&xm).unwrap()).unwrap().scale(0.5 / h);
            for k in 0..5 {
                assert!((fd[(k, 0)] - j[(k, t)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn lower_bound_respects_certified_constant() {
        let m = Model::new(ModelConfig::reference(Mode::Lip, 2.0), 5).unwrap();
        let ds = crate::data::synth(10, 5);
        assert!(empirical_lipschitz_lb(&m, &ds, 8, 1).unwrap() <= 2.0 * (1.0 + 1e-6));
    }
}

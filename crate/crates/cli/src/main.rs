use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lipnet1d::certify::{certify_network, DEFAULT_TOLERANCE};
use lipnet1d::data::{load_csv, synth, write_csv, Dataset, Normalization};
use lipnet1d::network::{Mode, Model, ModelConfig};
use lipnet1d::robustness::{empirical_lipschitz_lb, robust_accuracy_curve, write_curve_csv, AttackConfig};
use lipnet1d::train::{train, TrainConfig};

/// Default l2 weight when `--mode l2` is given without `--gamma`.
const DEFAULT_L2_GAMMA: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lipnet1d", version, about = "Train, certify and attack Lipschitz-bounded 1D CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic five-class signal dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write it together with its training history.
    Train(TrainArgs),
    /// Check the layer certificates of a lip-mode model; exits 0 iff they hold.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Also write the certificate JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Robust accuracy under an L2 PGD attack for a list of budgets.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma separated budgets, e.g. `0,2,4,8`.
        #[arg(long, value_delimiter = ',', required = true)]
        eps_list: Vec<f64>,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean accuracy and an empirical Lipschitz lower bound.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the materialized kernels, weights and biases as JSON.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Model configuration JSON; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_csv: PathBuf,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    /// l2 penalty weight (l2 mode only).
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save a model file at every checkpoint into this directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path; defaults to the model path with `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

/// Problems with the invocation itself, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", describe(&e));
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Joins the error chain, skipping causes a message already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LIPNET1D_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("LIPNET1D_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { n, seed, out } => {
            if n < 5 {
                return Err(usage("--n must be at least 5"));
            }
            let ds = synth(n, seed);
            write_csv(&ds, &out)?;
            println!("wrote {} signals to {}", ds.len(), out.display());
        }
        Command::Train(args) => run_train(args)?,
        Command::Certify { model, tolerance, out } => {
            if !(tolerance >= 0.0 && tolerance.is_finite()) {
                return Err(usage("--tolerance must be a nonnegative number"));
            }
            let model = Model::load(&model)?;
            let cert = certify_network(&model, tolerance)?;
            let json = cert.to_json();
            println!("{json}");
            if let Some(out) = out {
                write_text(&out, &json)?;
            }
            if !cert.pass {
                eprintln!("certificate failed: worst min eigenvalue {:e}", cert.worst_min_eig());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Attack {
            model,
            data,
            eps_list,
            steps,
            restarts,
            seed,
            out,
        } => {
            if eps_list.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(usage("--eps-list values must be nonnegative numbers"));
            }
            if steps == 0 || restarts == 0 {
                return Err(usage("--steps and --restarts must be positive"));
            }
            let model = Model::load(&model)?;
            let ds = model_input(&model, &data)?;
            let cfg = AttackConfig {
                steps,
                restarts,
                seed,
                ..AttackConfig::new(0.0)
            };
            let curve = robust_accuracy_curve(&model, &ds, &eps_list, &cfg)?;
            for (eps, acc) in &curve {
                println!("{eps},{acc}");
            }
            write_curve_csv(&curve, &out)?;
        }
        Command::Eval { model, data, iters, seed } => {
            if iters == 0 {
                return Err(usage("--iters must be positive"));
            }
            let model = Model::load(&model)?;
            let ds = model_input(&model, &data)?;
            println!("accuracy: {}", model.accuracy(&ds)?);
            println!("lipschitz_lower_bound: {}", empirical_lipschitz_lb(&model, &ds, iters, seed)?);
        }
        Command::Export { model, out } => {
            let model = Model::load(&model)?;
            write_text(&out, &model.theta_json()?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: TrainArgs) -> Result<()> {
    if let Some(rho) = args.rho {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(usage("--rho must be positive"));
        }
    }
    if let Some(g) = args.gamma {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(usage("--gamma must be nonnegative"));
        }
    }
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    if !(args.lr >= 0.0 && args.lr.is_finite()) {
        return Err(usage("--lr must be a nonnegative number"));
    }

    let train_raw = load_csv(&args.train_csv)?;
    let (channels, length) = train_raw
        .signal_shape()
        .ok_or_else(|| anyhow::anyhow!("{} contains no signals", args.train_csv.display()))?;

    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ModelConfig>(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => {
            let mut c = ModelConfig::reference(Mode::Lip, 10.0);
            c.input_length = length;
            c.input_channels = channels;
            c
        }
    };
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(rho) = args.rho {
        config.rho = rho;
    }
    config.shapes().map_err(|e| usage(e.to_string()))?;
    if (config.input_channels, config.input_length) != (channels, length) {
        bail!(
            "training data has {channels}x{length} signals but the model expects {}x{}",
            config.input_channels,
            config.input_length
        );
    }

    let stats = Normalization::fit(&train_raw);
    let train_ds = stats.apply(&train_raw);
    let test_ds = match &args.test_csv {
        Some(p) => Some(stats.apply(&load_csv(p)?)),
        None => None,
    };

    let mode = config.mode;
    let mut model = Model::new(config, args.seed)?;
    model.set_normalization(Some(stats));
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        l2_gamma: match mode {
            Mode::L2 => args.gamma.unwrap_or(DEFAULT_L2_GAMMA),
            _ => 0.0,
        },
        seed: args.seed,
        checkpoint_dir: args.checkpoint_dir.clone(),
        ..TrainConfig::default()
    };
    let (model, history) = train(&model, &train_ds, test_ds.as_ref(), &cfg)?;

    model.save(&args.out)?;
    let history_path = args.history.unwrap_or_else(|| history_default(&args.out));
    history.write_csv(&history_path)?;

    if let Some(last) = history.epochs.last() {
        print!(
            "epoch {}: loss {:.6}, train accuracy {:.4}",
            last.epoch, last.train_loss, last.train_acc
        );
        if last.test_acc.is_nan() {
            println!();
        } else {
            println!(", test accuracy {:.4}", last.test_acc);
        }
    }
    if let Some(cp) = history.checkpoints.last() {
        if let Some(ok) = cp.certified {
            println!("certified at final checkpoint: {ok}");
        }
    }
    println!("wrote {} and {}", args.out.display(), history_path.display());
    Ok(())
}

fn history_default(model_path: &Path) -> PathBuf {
    let mut name = model_path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "model".into());
    name.push(".history.csv");
    model_path.with_file_name(name)
}

/// Loads a dataset and applies the normalization stored with the model.
fn model_input(model: &Model, path: &Path) -> Result<Dataset> {
    let ds = load_csv(path)?;
    Ok(match model.normalization() {
        Some(n) => n.apply(&ds),
        None => ds,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

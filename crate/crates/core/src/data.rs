//! Labeled signal datasets: CSV ingestion, synthetic waveforms,
//! normalization and stratified splits.
//!
//! CSV rows are `label,v0,v1,…,v{N−1}`. Labels are integers `0..=4` or the
//! beat letters `N`, `L`, `R`, `A`, `V` (mapped in that order).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["N", "L", "R", "A", "V"];
pub const SYNTH_LENGTH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Each signal is `channels × length`.
    pub signals: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(signals: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        let ds = Dataset {
            signals,
            labels,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.signals.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "{} signals but {} labels",
                self.signals.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| **l >= self.class_names.len()) {
            return Err(Error::Config(format!("label {l} out of range")));
        }
        if let Some(first) = self.signals.first() {
            if let Some((i, s)) = self.signals.iter().enumerate().find(|(_, s)| s.shape() != first.shape()) {
                return Err(Error::LengthMismatch {
                    row: i + 1,
                    expected: first.cols(),
                    found: s.cols(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(channels, length)` of every signal.
    pub fn signal_shape(&self) -> Option<(usize, usize)> {
        self.signals.first().map(Tensor::shape)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for l in &self.labels {
            counts[*l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            signals: indices.iter().map(|&i| self.signals[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn parse_label(field: &str, row: usize) -> Result<usize> {
    let f = field.trim();
    if let Some(pos) = CLASS_NAMES.iter().position(|c| *c == f) {
        return Ok(pos);
    }
    match f.parse::<usize>() {
        Ok(v) if v < CLASS_NAMES.len() => Ok(v),
        _ => Err(Error::Format {
            location: format!("row {row}"),
            message: format!("invalid label {f:?}"),
        }),
    }
}

pub fn parse_csv<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut signals = Vec::new();
    let mut labels = Vec::new();
    let mut expected = None;
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::Format {
            location: format!("row {row}"),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = parse_label(fields.next().unwrap_or(""), row)?;
        let values = fields
            .enumerate()
            .map(|(j, f)| {
                f.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Format {
                    location: format!("row {row}, column {}", j + 2),
                    message: format!("invalid sample {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Format {
                location: format!("row {row}"),
                message: "no samples".into(),
            });
        }
        match expected {
            None => expected = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(Error::LengthMismatch {
                    row,
                    expected: n,
                    found: values.len(),
                })
            }
            _ => {}
        }
        let n = values.len();
        signals.push(Tensor::from_vec(1, n, values)?);
        labels.push(label);
    }
    Dataset::new(signals, labels)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(BufReader::new(file))
}

/// Single-channel datasets only; values use the shortest round-trip decimal form.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for (s, l) in ds.signals.iter().zip(&ds.labels) {
        if s.rows() != 1 {
            return Err(Error::Config("CSV output supports single-channel signals only".into()));
        }
        let mut line = l.to_string();
        for v in s.data() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Balanced five-class synthetic waveforms of length 128: Gaussian bump,
/// double bump, square pulse, sawtooth and chirp, with random amplitude and
/// position jitter plus N(0, 0.05²) noise.
pub fn synth(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut signals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASS_NAMES.len();
        let amp = rng.gen_range(0.8..1.2);
        let mut x = vec![0.0; SYNTH_LENGTH];
        match class {
            0 => {
                let c = rng.gen_range(40.0..88.0);
                let w = rng.gen_range(4.0..8.0);
                for (t, v) in x.iter_mut().enumerate() {
                    *v = amp * bump(t as f64, c, w);
                }
            }
            1 => {
                let c = rng.gen_range(25.0..65.0);
                let gap = rng.gen_range(22.0..36.0);
                let w = rng.gen_range(3.0..5.0);
                for (t, v) in x.iter_mut().enumerate() {
                    *v = amp * (bump(t as f64, c, w) + bump(t as f64, c + gap, w));
                }
            }
            2 => {
                let start = rng.gen_range(25.0..65.0);
                let width = rng.gen_range(24.0..40.0);
                for (t, v) in x.iter_mut().enumerate() {
                    let t = t as f64;
                    if t >= start && t < start + width {
                        *v = amp;
                    }
                }
            }
            3 => {
                let period = rng.gen_range(24.0..40.0);
                let phase = rng.gen_range(0.0..period);
                for (t, v) in x.iter_mut().enumerate() {
                    let r = ((t as f64 + phase) % period) / period;
                    *v = amp * (2.0 * r - 1.0);
                }
            }
            _ => {
                let f0 = rng.gen_range(0.01..0.02);
                let rate = rng.gen_range(0.0008..0.0012);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for (t, v) in x.iter_mut().enumerate() {
                    let t = t as f64;
                    *v = amp * (std::f64::consts::TAU * (f0 * t + 0.5 * rate * t * t) + phase).sin();
                }
            }
        }
        for v in x.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        signals.push(Tensor::from_vec(1, SYNTH_LENGTH, x).expect("length matches"));
        labels.push(class);
    }
    Dataset::new(signals, labels).expect("synthetic data is well formed")
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-(t - center).powi(2) / (2.0 * width * width)).exp()
}

/// Scalar affine normalization fitted on one dataset and reapplied to others.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    const VARIANCE_FLOOR: f64 = 1e-12;

    pub fn fit(ds: &Dataset) -> Normalization {
        let count: usize = ds.signals.iter().map(Tensor::len).sum();
        if count == 0 {
            return Normalization { mean: 0.0, std: 1.0 };
        }
        let mean = ds.signals.iter().map(Tensor::sum).sum::<f64>() / count as f64;
        let var = ds
            .signals
            .iter()
            .flat_map(|s| s.data().iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        Normalization {
            mean,
            std: var.max(Self::VARIANCE_FLOOR).sqrt(),
        }
    }

    pub fn apply_signal(&self, x: &Tensor) -> Tensor {
        x.map(|v| (v - self.mean) / self.std)
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            signals: ds.signals.iter().map(|s| self.apply_signal(s)).collect(),
            labels: ds.labels.clone(),
            class_names: ds.class_names.clone(),
        }
    }
}

/// Fits statistics on `ds` and returns the normalized copy with them.
pub fn normalize(ds: &Dataset) -> (Dataset, Normalization) {
    let n = Normalization::fit(ds);
    (n.apply(ds), n)
}

/// Seeded stratified split: each class is shuffled and its first
/// `round(fraction · n_class)` members go to the first part.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let cut = (fraction * members.len() as f64).round() as usize;
        first.extend_from_slice(&members[..cut]);
        second.extend_from_slice(&members[cut..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((ds.subset(&first), ds.subset(&second)))
}

//! Synthetic tasks that give adapters something to learn without external data.
//!
//! * Teacher-student regression: a "pretrained" base MLP, a teacher equal to the base
//!   plus a low-rank shift per layer, and a LoRA student initialised at the base.
//! * Character-level sequence classification: one-hot encoded strings labelled by
//!   which motif character occurs most often.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;
use crate::model::{forward, Activation, LoraLinear, ToyModel};
use crate::trainer::{Dataset, PruneConfig, RunData, Targets};

/// Standard normal draw (Box-Muller).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * standard_normal(rng))
}

/// Log-normal per-channel scales `exp(spread · N(0, 1))`, normalised to unit RMS so
/// stacking layers does not inflate activations.
fn channel_scales(n: usize, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| (spread * standard_normal(rng)).exp()).collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    raw.into_iter().map(|v| v / rms).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherStudentSpec {
    /// Layer widths including input and output, e.g. `[64, 64, 64, 64]` for three layers.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Rank of the per-layer teacher shift.
    pub shift_rank: usize,
    /// Norm of the teacher shift relative to the base weight.
    pub shift_scale: f64,
    /// Log-normal spread of input-channel and weight-row scales.
    pub channel_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TeacherStudentSpec {
    fn default() -> Self {
        TeacherStudentSpec {
            widths: vec![64, 64, 64, 64],
            activation: Activation::Relu,
            n_train: 512,
            n_heldout: 256,
            shift_rank: 4,
            shift_scale: 0.3,
            channel_spread: 0.75,
            noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharClassificationSpec {
    pub alphabet: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub n_train: usize,
    pub n_heldout: usize,
    pub seed: u64,
}

impl Default for CharClassificationSpec {
    fn default() -> Self {
        CharClassificationSpec {
            alphabet: 12,
            seq_len: 8,
            num_classes: 10,
            hidden: vec![64, 48],
            activation: Activation::Relu,
            n_train: 512,
            n_heldout: 256,
            seed: 0,
        }
    }
}

/// A student model and the data to fine-tune, evaluate and calibrate it with.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub student: ToyModel,
    pub data: RunData,
}

/// He-style initialisation with per-input-channel scales.
fn base_weight(m: usize, n: usize, row_scales: &[f64], rng: &mut impl Rng) -> Matrix {
    let w = gaussian(m, n, (2.0 / m as f64).sqrt(), rng);
    Matrix::from_fn(m, n, |i, j| w[(i, j)] * row_scales[i])
}

fn student_from_bases(bases: Vec<Matrix>, activations: Vec<Activation>, config: &PruneConfig, rng: &mut impl Rng) -> Result<ToyModel> {
    let layers = bases
        .into_iter()
        .map(|w| LoraLinear::with_fresh_adapter(w, config.rank, config.lora_scale, rng))
        .collect::<Result<Vec<_>>>()?;
    ToyModel::chain(layers, activations)
}

fn input_batch(rows: usize, scales: &[f64], rng: &mut impl Rng) -> Matrix {
    let x = gaussian(rows, scales.len(), 1.0, rng);
    Matrix::from_fn(rows, scales.len(), |i, j| x[(i, j)] * scales[j])
}

impl TeacherStudentSpec {
    pub fn generate(&self, config: &PruneConfig) -> Result<ToyProblem> {
        if self.widths.len() < 2 {
            return Err(XpertError::param("widths", format!("{:?}", self.widths), "need at least two widths"));
        }
        if self.n_train == 0 || self.n_heldout == 0 {
            return Err(XpertError::param("n_train/n_heldout", 0, "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n_layers = self.widths.len() - 1;
        let in_scales = channel_scales(self.widths[0], self.channel_spread, &mut rng);

        let mut bases = Vec::with_capacity(n_layers);
        let mut teacher_layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (m, n) = (self.widths[l], self.widths[l + 1]);
            let row_scales = channel_scales(m, self.channel_spread, &mut rng);
            let base = base_weight(m, n, &row_scales, &mut rng);
            let k = self.shift_rank.min(m.min(n) - 1).max(1);
            let u = gaussian(m, k, 1.0, &mut rng);
            let v = gaussian(k, n, 1.0, &mut rng);
            let shift = u.matmul(&v)?;
            let shift = shift.scaled(self.shift_scale * base.frobenius() / shift.frobenius().max(f64::MIN_POSITIVE));
            let teacher_w = base.add(&shift)?;
            teacher_layers.push(LoraLinear::new(teacher_w, Matrix::zeros(m, 1), Matrix::zeros(1, n), 0.0)?);
            bases.push(base);
        }
        let activations = vec![self.activation; n_layers - 1];
        let mut teacher = ToyModel::chain(teacher_layers, activations.clone())?;

        // rescale the last layer of both networks so teacher outputs have unit RMS
        let probe = input_batch(1024, &in_scales, &mut rng);
        let rms = (forward(&teacher, &probe)?.0.frobenius_sq() / (1024 * self.widths[n_layers]) as f64).sqrt();
        if rms > 0.0 {
            let last = teacher.layer_mut(n_layers - 1);
            let w = last.base_w().scaled(1.0 / rms);
            *last = LoraLinear::new(w, Matrix::zeros(last.in_dim(), 1), Matrix::zeros(1, last.out_dim()), 0.0)?;
            let base = bases.last_mut().expect("at least one layer");
            *base = base.scaled(1.0 / rms);
        }
        let student = student_from_bases(bases, activations, config, &mut rng)?;

        let labelled = |rows: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let x = input_batch(rows, &in_scales, rng);
            let (y, _) = forward(&teacher, &x)?;
            let noisy = Matrix::from_fn(y.rows(), y.cols(), |i, j| y[(i, j)] + self.noise * standard_normal(rng));
            Dataset::new(x, Targets::Regression(noisy))
        };
        let train = labelled(self.n_train, &mut rng)?;
        let heldout = labelled(self.n_heldout, &mut rng)?;
        let calibration = input_batch(config.calibration.batches * config.calibration.seq_len, &in_scales, &mut rng);
        Ok(ToyProblem {
            student,
            data: RunData {
                train,
                heldout,
                calibration,
            },
        })
    }
}

impl CharClassificationSpec {
    fn sample(&self, rows: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
        let dim = self.alphabet * self.seq_len;
        let mut x = Matrix::zeros(rows, dim);
        let mut labels = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut counts = vec![0usize; self.num_classes];
            for p in 0..self.seq_len {
                let c = rng.gen_range(0..self.alphabet);
                x[(r, p * self.alphabet + c)] = 1.0;
                if c < self.num_classes {
                    counts[c] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            labels.push(best);
        }
        (x, labels)
    }

    pub fn generate(&self, config: &PruneConfig) -> Result<ToyProblem> {
        if self.num_classes == 0 || self.num_classes > self.alphabet {
            return Err(XpertError::param("num_classes", self.num_classes, "must lie in 1..=alphabet"));
        }
        if self.n_train == 0 || self.n_heldout == 0 || self.seq_len == 0 {
            return Err(XpertError::param("n_train/n_heldout/seq_len", 0, "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut widths = vec![self.alphabet * self.seq_len];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        let n_layers = widths.len() - 1;
        let bases = (0..n_layers)
            .map(|l| {
                let ones = vec![1.0; widths[l]];
                base_weight(widths[l], widths[l + 1], &ones, &mut rng)
            })
            .collect();
        let student = student_from_bases(bases, vec![self.activation; n_layers - 1], config, &mut rng)?;
        let make = |rows: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let (x, labels) = self.sample(rows, rng);
            Dataset::new(
                x,
                Targets::Classes {
                    labels,
                    num_classes: self.num_classes,
                },
            )
        };
        let train = make(self.n_train, &mut rng)?;
        let heldout = make(self.n_heldout, &mut rng)?;
        let (calibration, _) = self.sample(config.calibration.batches * config.calibration.seq_len, &mut rng);
        Ok(ToyProblem {
            student,
            data: RunData {
                train,
                heldout,
                calibration,
            },
        })
    }
}

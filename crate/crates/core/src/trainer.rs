//! Adapter training interleaved with scoring, EMA smoothing, row-wise pruning and PBS,
//! plus the prune-then-finetune Wanda baseline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::masking::{ema_update, global_prune, mask_churn, rowwise_prune_with, sparsity_of, ScoreState};
use crate::matrix::Matrix;
use crate::model::{forward, ToyModel, DEFAULT_LORA_SCALE};
use crate::par::Parallelism;
use crate::pbs::{apply_pbs, masked_residual_norm, PbsOptions, DEFAULT_LAMBDA};
use crate::scoring::{score_layer, Criterion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Prune `floor(s · n)` entries in every row.
    #[default]
    Row,
    /// Prune `floor(s · m · n)` entries of the layer, anywhere.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Number of calibration sequences.
    pub batches: usize,
    /// Tokens per sequence; the calibration matrix has `batches · seq_len` rows.
    pub seq_len: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec { batches: 8, seq_len: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub ema_rate: f64,
    pub lambda: f64,
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub calibration: CalibrationSpec,
    pub criterion: Criterion,
    pub pbs_enabled: bool,
    /// Solve the PBS row system against `scale · A` (see [`PbsOptions::scale_adapter`]).
    pub pbs_scale_adapter: bool,
    /// Run one more PBS pass with the final masks right before merging.
    pub final_pbs_pass: bool,
    pub budget: Budget,
    pub lora_scale: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            sparsity: 0.5,
            ema_rate: 0.5,
            lambda: DEFAULT_LAMBDA,
            rank: 8,
            epochs: 3,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
            calibration: CalibrationSpec::default(),
            criterion: Criterion::Foresight,
            pbs_enabled: true,
            pbs_scale_adapter: true,
            final_pbs_pass: false,
            budget: Budget::Row,
            lora_scale: DEFAULT_LORA_SCALE,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(XpertError::param("sparsity", self.sparsity, "must lie in [0, 1)"));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(XpertError::param("ema_rate", self.ema_rate, "must lie in (0, 1]"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(XpertError::param("lambda", self.lambda, "must be finite and positive"));
        }
        if self.rank == 0 {
            return Err(XpertError::param("rank", self.rank, "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(XpertError::param("epochs", self.epochs, "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(XpertError::param("learning_rate", self.learning_rate, "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(XpertError::param("batch_size", self.batch_size, "must be at least 1"));
        }
        if self.calibration.batches == 0 || self.calibration.seq_len == 0 {
            return Err(XpertError::param(
                "calibration",
                format!("{}x{}", self.calibration.batches, self.calibration.seq_len),
                "needs at least one sequence of one token",
            ));
        }
        if !(self.lora_scale.is_finite() && self.lora_scale >= 0.0) {
            return Err(XpertError::param("lora_scale", self.lora_scale, "must be finite and nonnegative"));
        }
        if matches!(self.criterion, Criterion::ForesightQ | Criterion::ForesightK) {
            return Err(XpertError::param(
                "criterion",
                format!("{:?}", self.criterion),
                "attention sides are chosen by pairing rules; use foresight",
            ));
        }
        Ok(())
    }

    fn pbs_options(&self) -> PbsOptions {
        PbsOptions {
            lambda: self.lambda,
            scale_adapter: self.pbs_scale_adapter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Matrix),
    Classes { labels: Vec<usize>, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Matrix,
    targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        match &targets {
            Targets::Regression(y) => {
                if y.rows() != inputs.rows() {
                    return Err(XpertError::shape(
                        "Dataset targets",
                        format!("{} rows", inputs.rows()),
                        format!("{} rows", y.rows()),
                    ));
                }
            }
            Targets::Classes { labels, num_classes } => {
                if labels.len() != inputs.rows() {
                    return Err(XpertError::shape(
                        "Dataset labels",
                        format!("{} labels", inputs.rows()),
                        format!("{}", labels.len()),
                    ));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(XpertError::param("label", bad, "must be below num_classes"));
                }
            }
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select_rows(rows)?;
        let targets = match &self.targets {
            Targets::Regression(y) => Targets::Regression(y.select_rows(rows)?),
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                num_classes: *num_classes,
            },
        };
        Ok(Dataset { inputs, targets })
    }
}

/// Training, held-out and calibration data for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunData {
    pub train: Dataset,
    pub heldout: Dataset,
    /// Calibration activations, used only to measure input-channel norms for scoring.
    pub calibration: Matrix,
}

/// Loss value and `dL/d(prediction)`.
fn loss_and_grad(pred: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    match targets {
        Targets::Regression(y) => {
            if y.shape() != pred.shape() {
                return Err(XpertError::shape(
                    "regression targets",
                    format!("{}x{}", pred.rows(), pred.cols()),
                    format!("{}x{}", y.rows(), y.cols()),
                ));
            }
            let denom = (pred.rows() * pred.cols()) as f64;
            let diff = pred.sub(y)?;
            Ok((diff.frobenius_sq() / denom, diff.scaled(2.0 / denom)))
        }
        Targets::Classes { labels, num_classes } => {
            if pred.cols() != *num_classes || pred.rows() != labels.len() {
                return Err(XpertError::shape(
                    "class logits",
                    format!("{}x{}", labels.len(), num_classes),
                    format!("{}x{}", pred.rows(), pred.cols()),
                ));
            }
            let n = pred.rows() as f64;
            let mut loss = 0.0;
            let mut grad = Matrix::zeros(pred.rows(), pred.cols());
            for (i, &label) in labels.iter().enumerate() {
                let row = pred.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[label];
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[j] - log_z).exp();
                    *g = (p - if j == label { 1.0 } else { 0.0 }) / n;
                }
            }
            Ok((loss / n, grad))
        }
    }
}

/// Gradient of the loss with respect to one layer's adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub b: Matrix,
    pub a: Matrix,
}

/// Loss and adapter gradients for every layer. Base weights are frozen and get none;
/// masked coordinates receive no gradient.
pub fn adapter_gradients(model: &ToyModel, inputs: &Matrix, targets: &Targets) -> Result<(f64, Vec<AdapterGrad>)> {
    let n_layers = model.num_layers();
    let weights: Vec<Matrix> = model.layers().iter().map(|l| l.masked_effective()).collect();
    let mut hs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = inputs.clone();
    for (i, w) in weights.iter().enumerate() {
        let z = h.matmul(w).map_err(|e| e.context(format!("layer {i}")))?;
        hs.push(h);
        h = match model.activations().get(i) {
            Some(act) => z.map(|v| act.apply(v)),
            None => z.clone(),
        };
        h.ensure_finite(|| format!("activation output of layer {i}"))?;
        pre.push(z);
    }
    let (loss, mut delta) = loss_and_grad(&h, targets)?;

    let mut grads = Vec::with_capacity(n_layers);
    for i in (0..n_layers).rev() {
        let layer = model.layer(i);
        let mut g_w = hs[i].transpose().matmul(&delta)?;
        if let Some(mask) = layer.mask() {
            g_w = g_w.hadamard(mask)?;
        }
        let s = layer.scale();
        grads.push(AdapterGrad {
            b: g_w.matmul(&layer.adapter_a().transpose())?.scaled(s),
            a: layer.adapter_b().transpose().matmul(&g_w)?.scaled(s),
        });
        if i > 0 {
            let act = model.activations()[i - 1];
            let back = delta.matmul(&weights[i].transpose())?;
            let z = &pre[i - 1];
            delta = back.hadamard(&z.map(|v| act.derivative(v)))?;
            delta.ensure_finite(|| format!("backpropagated gradient at layer {}", i - 1))?;
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<EvalMetrics> {
    let (pred, _) = forward(model, data.inputs())?;
    let (loss, _) = loss_and_grad(&pred, data.targets())?;
    let accuracy = match data.targets() {
        Targets::Regression(_) => None,
        Targets::Classes { labels, .. } => {
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(i, &label)| argmax(pred.row(*i)) == label)
                .count();
            Some(correct as f64 / labels.len() as f64)
        }
    };
    Ok(EvalMetrics { loss, accuracy })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// One pass of minibatch gradient descent over `data` in an order drawn from `rng`.
/// Updates only adapter factors; returns the mean minibatch loss.
pub fn train_epoch(
    model: &mut ToyModel,
    data: &Dataset,
    options: TrainOptions,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    if options.batch_size == 0 {
        return Err(XpertError::param("batch_size", 0, "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for (step, chunk) in order.chunks(options.batch_size).enumerate() {
        let batch = data.subset(chunk)?;
        let (loss, grads) = adapter_gradients(model, batch.inputs(), batch.targets())
            .map_err(|e| e.context(format!("epoch {epoch}, step {step}")))?;
        if !loss.is_finite() {
            return Err(XpertError::Diverged { epoch, step, loss });
        }
        if options.learning_rate != 0.0 {
            for (i, g) in grads.iter().enumerate() {
                let layer = model.layer_mut(i);
                let b = layer.adapter_b().sub(&g.b.scaled(options.learning_rate))?;
                let a = layer.adapter_a().sub(&g.a.scaled(options.learning_rate))?;
                if b.data().iter().chain(a.data()).any(|v| !v.is_finite()) {
                    return Err(XpertError::Diverged { epoch, step, loss });
                }
                layer.set_adapters(b, a)?;
            }
        }
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Folds `scale · BA` into the base weight, applies each layer's mask, and zeroes the
/// adapters. Every prunable layer must carry a mask.
pub fn merge_and_mask(model: &ToyModel) -> Result<ToyModel> {
    let mut out = model.clone();
    let prunable = model.prunable_layers();
    for i in 0..model.num_layers() {
        let layer = out.layer_mut(i);
        if layer.mask().is_none() && prunable.contains(&i) {
            return Err(XpertError::MissingMask { layer: i });
        }
        let merged = layer.masked_effective();
        let (b_rows, b_cols) = layer.adapter_b().shape();
        let (a_rows, a_cols) = layer.adapter_a().shape();
        layer.set_base_w(merged)?;
        layer.set_adapters(Matrix::zeros(b_rows, b_cols), Matrix::zeros(a_rows, a_cols))?;
    }
    Ok(out)
}

/// Diagnostics for one prunable layer in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEpochRecord {
    pub layer: usize,
    pub sparsity: f64,
    pub churn: f64,
    /// `‖(1 − M) ⊙ (W + s·BA)‖²_F` after the adapter update, before PBS.
    pub violation_mass: f64,
    /// Same quantity after PBS, when it ran.
    pub residual_after_pbs: Option<f64>,
    pub over_constrained_rows: usize,
    pub pbs_update_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of prunable entries whose mask bit flipped this epoch; the first epoch
    /// compares against the dense all-ones mask.
    pub mask_churn: f64,
    pub layers: Vec<LayerEpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub criterion: Criterion,
    /// The LoRA scale is folded into the effective product `W + scale·BA` everywhere.
    pub scale_in_effective_product: bool,
    pub epochs: Vec<EpochRecord>,
    pub final_sparsity: BTreeMap<usize, f64>,
    /// Held-out metrics of the merged sparse model.
    pub heldout: EvalMetrics,
    /// Held-out metrics of the same adapters merged without any mask.
    pub dense_heldout: EvalMetrics,
}

/// Result of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Merged sparse model: masked base weights, zero adapters.
    pub merged: ToyModel,
    /// The same model before merging, adapters trained and final masks set.
    pub adapted: ToyModel,
    pub record: RunRecord,
}

impl RunOutput {
    pub fn into_pair(self) -> (ToyModel, RunRecord) {
        (self.merged, self.record)
    }
}

impl RunRecord {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn mask_churn(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mask_churn).collect()
    }
}

fn check_model_rank(model: &ToyModel, config: &PruneConfig) -> Result<()> {
    for (i, layer) in model.layers().iter().enumerate() {
        if layer.rank() != config.rank {
            return Err(XpertError::InvalidModel(format!(
                "layer {i} has adapter rank {} but the config asks for {}",
                layer.rank(),
                config.rank
            )));
        }
    }
    Ok(())
}

fn make_mask(scores: &crate::scoring::ScoreMatrix, config: &PruneConfig, par: Parallelism) -> Result<Matrix> {
    match config.budget {
        Budget::Row => rowwise_prune_with(scores, config.sparsity, par),
        Budget::Global => global_prune(scores, config.sparsity),
    }
}

fn training_rng(config: &PruneConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed)
}

fn dense_reference(model: &ToyModel) -> ToyModel {
    let mut dense = model.clone();
    for i in 0..dense.num_layers() {
        dense.layer_mut(i).clear_mask();
    }
    dense
}

/// Computes one mask per prunable layer from fresh scores at the model's current weights.
fn score_all(
    model: &ToyModel,
    calibration: &Matrix,
    criterion: Criterion,
    par: Parallelism,
) -> Result<Vec<(usize, crate::scoring::ScoreMatrix)>> {
    let (_, stats) = forward(model, calibration)?;
    model
        .prunable_layers()
        .into_iter()
        .map(|l| Ok((l, score_layer(model, l, &stats, criterion, par).map_err(|e| e.context(format!("layer {l}")))?)))
        .collect()
}

/// Adapter fine-tuning with evolving masks: per epoch, train, score, smooth, prune, PBS.
/// After the last epoch the adapters are merged and the final masks applied.
pub fn efficientxpert_run(model: &ToyModel, data: &RunData, config: &PruneConfig) -> Result<(ToyModel, RunRecord)> {
    efficientxpert_run_with(model, data, config, Parallelism::Sequential)
}

pub fn efficientxpert_run_with(
    model: &ToyModel,
    data: &RunData,
    config: &PruneConfig,
    par: Parallelism,
) -> Result<(ToyModel, RunRecord)> {
    efficientxpert_run_output(model, data, config, par).map(RunOutput::into_pair)
}

/// Like [`efficientxpert_run_with`], also returning the model right before the merge.
pub fn efficientxpert_run_output(
    model: &ToyModel,
    data: &RunData,
    config: &PruneConfig,
    par: Parallelism,
) -> Result<RunOutput> {
    config.validate()?;
    check_model_rank(model, config)?;
    let mut model = dense_reference(model);
    let mut rng = training_rng(config);
    let train_opts = TrainOptions {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
    };
    let prunable = model.prunable_layers();
    let mut states: BTreeMap<usize, ScoreState> = prunable
        .iter()
        .map(|&l| Ok((l, ScoreState::new(config.ema_rate)?)))
        .collect::<Result<_>>()?;
    let mut masks: BTreeMap<usize, Matrix> = BTreeMap::new();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let train_loss = train_epoch(&mut model, &data.train, train_opts, &mut rng, epoch)?;
        let fresh = score_all(&model, &data.calibration, config.criterion, par)
            .map_err(|e| e.context(format!("epoch {epoch}")))?;

        let mut flipped = 0.0;
        let mut entries = 0.0;
        let mut layers = Vec::with_capacity(fresh.len());
        for (l, scores) in fresh {
            let ctx = |e: XpertError| e.context(format!("epoch {epoch}, layer {l}"));
            let state = ema_update(&states[&l], scores).map_err(ctx)?;
            let mask = make_mask(state.smoothed().expect("updated state has scores"), config, par).map_err(ctx)?;
            states.insert(l, state);

            let (m, n) = mask.shape();
            let previous = masks.get(&l).cloned().unwrap_or_else(|| Matrix::ones(m, n));
            let churn = mask_churn(&previous, &mask).map_err(ctx)?;
            flipped += churn * (m * n) as f64;
            entries += (m * n) as f64;

            let violation_mass = masked_residual_norm(model.layer(l), &mask).map_err(ctx)?;
            let mut record = LayerEpochRecord {
                layer: l,
                sparsity: sparsity_of(&mask).map_err(ctx)?,
                churn,
                violation_mass,
                residual_after_pbs: None,
                over_constrained_rows: 0,
                pbs_update_norm: 0.0,
            };
            if config.pbs_enabled {
                let report = apply_pbs(model.layer_mut(l), &mask, config.pbs_options(), par).map_err(ctx)?;
                record.residual_after_pbs = Some(masked_residual_norm(model.layer(l), &mask).map_err(ctx)?);
                record.over_constrained_rows = report.over_constrained_rows();
                record.pbs_update_norm = report.rows.iter().map(|r| r.update_norm * r.update_norm).sum::<f64>().sqrt();
            }
            masks.insert(l, mask);
            layers.push(record);
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6}, churn {:.4}", flipped / entries.max(1.0));
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            mask_churn: if entries > 0.0 { flipped / entries } else { 0.0 },
            layers,
        });
    }

    if config.pbs_enabled && config.final_pbs_pass {
        for (&l, mask) in &masks {
            apply_pbs(model.layer_mut(l), mask, config.pbs_options(), par)
                .map_err(|e| e.context(format!("final PBS pass, layer {l}")))?;
        }
    }
    finish(model, masks, data, "efficientxpert", config.criterion, epochs)
}

/// Prune once from the initial effective weights (Wanda scores), zero the pruned base
/// entries, fine-tune adapters, and reapply the original mask when merging.
pub fn wanda_baseline_run(model: &ToyModel, data: &RunData, config: &PruneConfig) -> Result<(ToyModel, RunRecord)> {
    wanda_baseline_run_with(model, data, config, Parallelism::Sequential)
}

pub fn wanda_baseline_run_with(
    model: &ToyModel,
    data: &RunData,
    config: &PruneConfig,
    par: Parallelism,
) -> Result<(ToyModel, RunRecord)> {
    wanda_baseline_run_output(model, data, config, par).map(RunOutput::into_pair)
}

pub fn wanda_baseline_run_output(
    model: &ToyModel,
    data: &RunData,
    config: &PruneConfig,
    par: Parallelism,
) -> Result<RunOutput> {
    config.validate()?;
    check_model_rank(model, config)?;
    let mut model = dense_reference(model);
    let mut masks = BTreeMap::new();
    for (l, scores) in score_all(&model, &data.calibration, Criterion::Wanda, par)? {
        let mask = make_mask(&scores, config, par)?;
        let pruned_base = model.layer(l).base_w().hadamard(&mask)?;
        model.layer_mut(l).set_base_w(pruned_base)?;
        masks.insert(l, mask);
    }

    let mut rng = training_rng(config);
    let train_opts = TrainOptions {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let train_loss = train_epoch(&mut model, &data.train, train_opts, &mut rng, epoch)?;
        let layers = masks
            .iter()
            .map(|(&l, mask)| {
                Ok(LayerEpochRecord {
                    layer: l,
                    sparsity: sparsity_of(mask)?,
                    churn: 0.0,
                    violation_mass: masked_residual_norm(model.layer(l), mask)?,
                    residual_after_pbs: None,
                    over_constrained_rows: 0,
                    pbs_update_norm: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            mask_churn: 0.0,
            layers,
        });
    }
    finish(model, masks, data, "wanda_baseline", Criterion::Wanda, epochs)
}

fn finish(
    mut model: ToyModel,
    masks: BTreeMap<usize, Matrix>,
    data: &RunData,
    method: &str,
    criterion: Criterion,
    epochs: Vec<EpochRecord>,
) -> Result<RunOutput> {
    let dense_merged = {
        let mut dense = model.clone();
        for (&l, mask) in &masks {
            dense.layer_mut(l).set_mask(Matrix::ones(mask.rows(), mask.cols()))?;
        }
        merge_and_mask(&dense)?
    };
    let mut final_sparsity = BTreeMap::new();
    for (l, mask) in masks {
        final_sparsity.insert(l, sparsity_of(&mask)?);
        model.layer_mut(l).set_mask(mask)?;
    }
    let merged = merge_and_mask(&model)?;
    let record = RunRecord {
        method: method.to_string(),
        criterion,
        scale_in_effective_product: true,
        epochs,
        final_sparsity,
        heldout: evaluate(&merged, &data.heldout)?,
        dense_heldout: evaluate(&dense_merged, &data.heldout)?,
    };
    Ok(RunOutput {
        merged,
        adapted: model,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LoraLinear};
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn small_model(rng: &mut ChaCha8Rng) -> ToyModel {
        let layers = vec![
            LoraLinear::new(random(4, 4, rng), random(4, 2, rng), random(2, 4, rng), 2.0).unwrap(),
            LoraLinear::new(random(4, 3, rng), random(4, 2, rng), random(2, 3, rng), 2.0).unwrap(),
        ];
        ToyModel::chain(layers, vec![Activation::Relu]).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = PruneConfig::default();
        assert_eq!((c.sparsity, c.ema_rate, c.lambda, c.rank, c.epochs), (0.5, 0.5, 1e-8, 8, 3));
        assert_eq!(c.learning_rate, 1e-4);
        c.validate().unwrap();
        for bad in [
            PruneConfig { sparsity: 1.0, ..c.clone() },
            PruneConfig { ema_rate: 0.0, ..c.clone() },
            PruneConfig { lambda: 0.0, ..c.clone() },
            PruneConfig { epochs: 0, ..c.clone() },
            PruneConfig { criterion: Criterion::ForesightQ, ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_adapters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = small_model(&mut rng);
        let before = model.clone();
        let data = Dataset::new(random(10, 4, &mut rng), Targets::Regression(random(10, 3, &mut rng))).unwrap();
        let opts = TrainOptions { learning_rate: 0.0, batch_size: 4 };
        let loss = train_epoch(&mut model, &data, opts, &mut rng, 1).unwrap();
        assert!(loss > 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_row() {
        let pred = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]);
        let (loss, g) = loss_and_grad(&pred, &Targets::Classes { labels: vec![1, 2], num_classes: 3 }).unwrap();
        assert!(loss > 0.0);
        for i in 0..2 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn merge_requires_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = small_model(&mut rng);
        assert!(matches!(merge_and_mask(&model), Err(XpertError::MissingMask { layer: 0 })));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Matrix::zeros(3, 2), Targets::Regression(Matrix::zeros(2, 2))).is_err());
        assert!(Dataset::new(Matrix::zeros(2, 2), Targets::Classes { labels: vec![0, 3], num_classes: 3 }).is_err());
    }
}

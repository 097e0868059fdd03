//! LoRA-adapted linear layers, toy networks built from them, and calibration statistics.
//!
//! Weights follow the `X · W` convention: a layer with weight `m × n` maps `m` input
//! channels to `n` output channels, and activations are `tokens × channels`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;

/// LoRA multiplier for the common `alpha = 16, r = 8` recipe.
pub const DEFAULT_LORA_SCALE: f64 = 2.0;

/// A frozen base weight plus a low-rank adapter `scale · B · A`, optionally masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLinear {
    base_w: Matrix,
    adapter_b: Matrix,
    adapter_a: Matrix,
    scale: f64,
    mask: Option<Matrix>,
}

impl LoraLinear {
    pub fn new(base_w: Matrix, adapter_b: Matrix, adapter_a: Matrix, scale: f64) -> Result<Self> {
        let (m, n) = base_w.shape();
        let r = adapter_a.rows();
        if adapter_b.shape() != (m, r) {
            return Err(XpertError::shape(
                "LoraLinear::new adapter_b",
                format!("{m}x{r}"),
                format!("{}x{}", adapter_b.rows(), adapter_b.cols()),
            ));
        }
        if adapter_a.cols() != n {
            return Err(XpertError::shape(
                "LoraLinear::new adapter_a",
                format!("{r}x{n}"),
                format!("{}x{}", adapter_a.rows(), adapter_a.cols()),
            ));
        }
        if r >= m.min(n) {
            return Err(XpertError::shape(
                "LoraLinear::new rank",
                format!("rank < min({m}, {n})"),
                format!("rank {r}"),
            ));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(XpertError::param("scale", scale, "must be finite and nonnegative"));
        }
        Ok(LoraLinear {
            base_w,
            adapter_b,
            adapter_a,
            scale,
            mask: None,
        })
    }

    /// Standard LoRA initialisation: `B = 0`, `A` uniform in `±1/sqrt(n)`.
    pub fn with_fresh_adapter(base_w: Matrix, rank: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let (m, n) = base_w.shape();
        if rank == 0 {
            return Err(XpertError::param("rank", rank, "must be at least 1"));
        }
        let bound = 1.0 / (n as f64).sqrt();
        let a = Matrix::from_fn(rank, n, |_, _| rng.gen_range(-bound..bound));
        Self::new(base_w, Matrix::zeros(m, rank), a, scale)
    }

    pub fn base_w(&self) -> &Matrix {
        &self.base_w
    }

    pub fn adapter_b(&self) -> &Matrix {
        &self.adapter_b
    }

    pub fn adapter_a(&self) -> &Matrix {
        &self.adapter_a
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mask(&self) -> Option<&Matrix> {
        self.mask.as_ref()
    }

    pub fn rank(&self) -> usize {
        self.adapter_a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.base_w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.base_w.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base_w.shape()
    }

    pub fn set_adapters(&mut self, adapter_b: Matrix, adapter_a: Matrix) -> Result<()> {
        adapter_b.ensure_shape("set_adapters adapter_b", self.adapter_b.rows(), self.adapter_b.cols())?;
        adapter_a.ensure_shape("set_adapters adapter_a", self.adapter_a.rows(), self.adapter_a.cols())?;
        self.adapter_b = adapter_b;
        self.adapter_a = adapter_a;
        Ok(())
    }

    pub fn set_adapter_b(&mut self, adapter_b: Matrix) -> Result<()> {
        adapter_b.ensure_shape("set_adapter_b", self.adapter_b.rows(), self.adapter_b.cols())?;
        self.adapter_b = adapter_b;
        Ok(())
    }

    pub(crate) fn set_base_w(&mut self, base_w: Matrix) -> Result<()> {
        base_w.ensure_shape("set_base_w", self.base_w.rows(), self.base_w.cols())?;
        self.base_w = base_w;
        Ok(())
    }

    /// Installs (or replaces) the mask after checking shape and binarity.
    pub fn set_mask(&mut self, mask: Matrix) -> Result<()> {
        mask.ensure_shape("set_mask", self.base_w.rows(), self.base_w.cols())?;
        ensure_binary(&mask)?;
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// `scale · B · A`.
    pub fn adapter_product(&self) -> Matrix {
        self.adapter_b
            .matmul(&self.adapter_a)
            .expect("adapter shapes validated at construction")
            .scaled(self.scale)
    }

    /// `W + scale · B · A`, ignoring any mask.
    pub fn compose_effective(&self) -> Matrix {
        self.base_w
            .add(&self.adapter_product())
            .expect("adapter shapes validated at construction")
    }

    /// `M ⊙ (W + scale · B · A)` when a mask is set, the effective weight otherwise.
    pub fn masked_effective(&self) -> Matrix {
        let eff = self.compose_effective();
        match &self.mask {
            Some(mask) => eff.hadamard(mask).expect("mask shape validated"),
            None => eff,
        }
    }
}

/// Free-function form of [`LoraLinear::compose_effective`].
pub fn compose_effective(layer: &LoraLinear) -> Matrix {
    layer.compose_effective()
}

pub(crate) fn ensure_binary(mask: &Matrix) -> Result<()> {
    for i in 0..mask.rows() {
        for (j, &v) in mask.row(i).iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(XpertError::NonBinaryMask { row: i, col: j, value: v });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which downstream weight a prunable layer is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "partner")]
pub enum PairingRule {
    /// The next linear layer consumes this layer's output.
    Downstream(usize),
    /// This layer is a query projection; the partner is its key projection.
    AttentionQ(usize),
    /// This layer is a key projection; the partner is its query projection.
    AttentionK(usize),
    /// No downstream weight: score locally (activation-weighted magnitude).
    LocalFallback,
}

/// An ordered stack of LoRA layers with the pairing graph used for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<LoraLinear>,
    pairing: BTreeMap<usize, PairingRule>,
    activations: Vec<Activation>,
}

impl ToyModel {
    /// `activations[i]` is applied between layer `i` and layer `i + 1`.
    pub fn new(
        layers: Vec<LoraLinear>,
        pairing: BTreeMap<usize, PairingRule>,
        activations: Vec<Activation>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(XpertError::InvalidModel("model has no layers".into()));
        }
        if activations.len() != layers.len() - 1 {
            return Err(XpertError::InvalidModel(format!(
                "{} layers need {} activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (&idx, rule) in &pairing {
            let layer = layers
                .get(idx)
                .ok_or_else(|| XpertError::InvalidModel(format!("pairing names missing layer {idx}")))?;
            match *rule {
                PairingRule::Downstream(p) => {
                    let partner = layers.get(p).ok_or_else(|| {
                        XpertError::InvalidModel(format!("layer {idx} pairs with missing layer {p}"))
                    })?;
                    if p == idx || partner.in_dim() != layer.out_dim() {
                        return Err(XpertError::InvalidModel(format!(
                            "layer {idx} ({}x{}) cannot feed downstream partner {p} ({}x{})",
                            layer.in_dim(),
                            layer.out_dim(),
                            partner.in_dim(),
                            partner.out_dim()
                        )));
                    }
                }
                PairingRule::AttentionQ(p) | PairingRule::AttentionK(p) => {
                    let partner = layers.get(p).ok_or_else(|| {
                        XpertError::InvalidModel(format!("layer {idx} pairs with missing layer {p}"))
                    })?;
                    if p == idx || partner.shape() != layer.shape() {
                        return Err(XpertError::InvalidModel(format!(
                            "attention layers {idx} and {p} must share a d x d_k shape"
                        )));
                    }
                }
                PairingRule::LocalFallback => {}
            }
        }
        for i in 0..layers.len() - 1 {
            if is_attention_pair(&pairing, i, i + 1) {
                continue;
            }
            if layers[i].out_dim() != layers[i + 1].in_dim() {
                return Err(XpertError::InvalidModel(format!(
                    "layer {i} outputs {} channels but layer {} expects {}",
                    layers[i].out_dim(),
                    i + 1,
                    layers[i + 1].in_dim()
                )));
            }
        }
        Ok(ToyModel {
            layers,
            pairing,
            activations,
        })
    }

    /// A plain MLP chain: layer `i` pairs with `i + 1`, the last layer scores locally.
    pub fn chain(layers: Vec<LoraLinear>, activations: Vec<Activation>) -> Result<Self> {
        let n = layers.len();
        let pairing = (0..n)
            .map(|i| {
                let rule = if i + 1 < n {
                    PairingRule::Downstream(i + 1)
                } else {
                    PairingRule::LocalFallback
                };
                (i, rule)
            })
            .collect();
        Self::new(layers, pairing, activations)
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LoraLinear {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LoraLinear {
        &mut self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn pairing(&self) -> &BTreeMap<usize, PairingRule> {
        &self.pairing
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Layer indices that carry a pairing rule, in ascending order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.pairing.keys().copied().collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn has_attention_fan_out(&self) -> bool {
        (0..self.layers.len().saturating_sub(1)).any(|i| is_attention_pair(&self.pairing, i, i + 1))
    }
}

fn is_attention_pair(pairing: &BTreeMap<usize, PairingRule>, a: usize, b: usize) -> bool {
    matches!(
        pairing.get(&a),
        Some(PairingRule::AttentionQ(p)) | Some(PairingRule::AttentionK(p)) if *p == b
    )
}

/// Per-layer `‖X_{:,i}‖₂` of the inputs each layer saw during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    input_col_norms: Vec<Vec<f64>>,
}

impl CalibrationStats {
    pub fn new(input_col_norms: Vec<Vec<f64>>) -> Result<Self> {
        for (layer, norms) in input_col_norms.iter().enumerate() {
            if let Some(&bad) = norms.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(XpertError::param("input_col_norms", bad, "must be finite and nonnegative"))
                    .map_err(|e| e.context(format!("layer {layer}")));
            }
        }
        Ok(CalibrationStats { input_col_norms })
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.input_col_norms[i]
    }

    pub fn num_layers(&self) -> usize {
        self.input_col_norms.len()
    }
}

/// Runs `input` through the model with masked effective weights and records the
/// column norms of every layer's input.
pub fn forward(model: &ToyModel, input: &Matrix) -> Result<(Matrix, CalibrationStats)> {
    if model.has_attention_fan_out() {
        return Err(XpertError::InvalidModel(
            "attention Q/K pairs are scored only; the model cannot be executed".into(),
        ));
    }
    if input.cols() != model.in_dim() {
        return Err(XpertError::shape(
            "forward input",
            format!("{} columns", model.in_dim()),
            format!("{} columns", input.cols()),
        ));
    }
    let mut norms = Vec::with_capacity(model.num_layers());
    let mut h = input.clone();
    for (i, layer) in model.layers().iter().enumerate() {
        norms.push(h.col_norms());
        let mut z = h.matmul(&layer.masked_effective())?;
        if let Some(act) = model.activations.get(i) {
            z = z.map(|v| act.apply(v));
        }
        z.ensure_finite(|| format!("activation output of layer {i}"))?;
        h = z;
    }
    Ok((h, CalibrationStats { input_col_norms: norms }))
}

//! Browser bindings for three small interactive views of `xpert-core`.
//!
//! Every export takes plain numbers or JSON and returns a JSON string, so the page
//! needs no generated TypeScript glue beyond the default `wasm-bindgen` output.
//! The `*_json` functions are ordinary Rust and are what the tests exercise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;
use xpert_core::analysis::{propagation_report, PropagationReport};
use xpert_core::masking::{mask_churn, rowwise_prune};
use xpert_core::pbs::{apply_pbs, masked_residual_norm, PbsOptions};
use xpert_core::scoring::{foresight_loss, foresight_scores, magnitude_scores, wanda_scores};
use xpert_core::toy::standard_normal;
use xpert_core::{LoraLinear, Matrix, Parallelism, XpertError};

type Result<T> = std::result::Result<T, String>;

fn core<T>(r: std::result::Result<T, XpertError>) -> Result<T> {
    r.map_err(|e| e.to_string())
}

fn parse_rows(name: &str, json: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(json).map_err(|e| format!("{name}: {e}"))?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(format!("{name}: rows have different lengths"));
    }
    core(Matrix::new(rows.len(), cols, rows.concat())).map_err(|e| format!("{name}: {e}"))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Prunes each listed entry of `w1` on its own and reports local vs downstream loss.
/// Matrices are nested row arrays; `entries` is `[[row, col], ...]`.
pub fn propagation_json(x: &str, w1: &str, w2: &str, entries: &str) -> Result<String> {
    let x = parse_rows("x", x)?;
    let w1 = parse_rows("w1", w1)?;
    let w2 = parse_rows("w2", w2)?;
    let entries: Vec<(usize, usize)> = serde_json::from_str(entries).map_err(|e| format!("entries: {e}"))?;
    for &(i, j) in &entries {
        if i >= w1.rows() || j >= w1.cols() {
            return Err(format!("entry ({i}, {j}) is outside w1 ({}x{})", w1.rows(), w1.cols()));
        }
    }
    let report: PropagationReport = core(propagation_report(&x, &w1, &w2, &entries))?;
    Ok(to_json(&report))
}

#[derive(Debug, Serialize)]
pub struct PrunePreview {
    pub sparsity: f64,
    pub foresight_mask: Vec<Vec<u8>>,
    pub wanda_mask: Vec<Vec<u8>>,
    /// Fraction of entries on which the two masks differ.
    pub disagreement: f64,
    pub foresight_downstream_loss: f64,
    pub wanda_downstream_loss: f64,
    pub downstream_row_norms: Vec<f64>,
    pub input_col_norms: Vec<f64>,
}

fn mask_rows(m: &Matrix) -> Vec<Vec<u8>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as u8).collect()).collect()
}

/// Random two-layer block with uneven downstream rows; compares the ForeSight and
/// Wanda masks at `sparsity` and the output error each one causes.
pub fn prune_preview_json(seed: u64, width: usize, sparsity: f64) -> Result<String> {
    if !(2..=32).contains(&width) {
        return Err(format!("width must be in 2..=32, got {width}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(4 * width, width, &mut rng);
    let w1 = gaussian(width, width, &mut rng);
    // spread the downstream row norms so propagation matters
    let spread: Vec<f64> = (0..width).map(|_| (1.2 * standard_normal(&mut rng)).exp()).collect();
    let w2 = Matrix::from_fn(width, width, |i, _| spread[i] * standard_normal(&mut rng));
    let norms = x.col_norms();
    let fs = core(foresight_scores(&w1, &w2, &norms))?;
    let wa = core(wanda_scores(&w1, &norms))?;
    let fs_mask = core(rowwise_prune(&fs, sparsity))?;
    let wa_mask = core(rowwise_prune(&wa, sparsity))?;
    Ok(to_json(&PrunePreview {
        sparsity,
        disagreement: core(mask_churn(&fs_mask, &wa_mask))?,
        foresight_downstream_loss: core(foresight_loss(&fs_mask, &w1, &w2, &x))?,
        wanda_downstream_loss: core(foresight_loss(&wa_mask, &w1, &w2, &x))?,
        foresight_mask: mask_rows(&fs_mask),
        wanda_mask: mask_rows(&wa_mask),
        downstream_row_norms: w2.row_norms(),
        input_col_norms: norms,
    }))
}

#[derive(Debug, Serialize)]
pub struct RankPoint {
    pub rank: usize,
    /// `‖(1 − M) ⊙ (W + scale·BA)‖²`, before and after correcting `B`.
    pub residual_before: f64,
    pub residual_after: f64,
    pub over_constrained_rows: usize,
}

/// For adapter ranks `1..=max_rank`: draws a random layer and adapter, prunes by
/// magnitude and reports how much of the pruned mass the closed-form correction of
/// `B` removes. Higher rank gives the correction more room.
pub fn pbs_sweep_json(seed: u64, width: usize, sparsity: f64, max_rank: usize, lambda: f64) -> Result<String> {
    if !(2..=64).contains(&width) {
        return Err(format!("width must be in 2..=64, got {width}"));
    }
    if !(1..width).contains(&max_rank) {
        return Err(format!("max rank must be in 1..{width}, got {max_rank}"));
    }
    let mut points = Vec::with_capacity(max_rank);
    for rank in 1..=max_rank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(width, width, &mut rng);
        let b = gaussian(width, rank, &mut rng).scaled(0.1);
        let a = gaussian(rank, width, &mut rng).scaled(0.1);
        let mut layer = core(LoraLinear::new(w, b, a, 2.0))?;
        let mask = core(rowwise_prune(&magnitude_scores(&layer.compose_effective()), sparsity))?;
        let before = core(masked_residual_norm(&layer, &mask))?;
        let options = PbsOptions { lambda, scale_adapter: true };
        let report = core(apply_pbs(&mut layer, &mask, options, Parallelism::Sequential))?;
        points.push(RankPoint {
            rank,
            residual_before: before,
            residual_after: core(masked_residual_norm(&layer, &mask))?,
            over_constrained_rows: report.over_constrained_rows(),
        });
    }
    Ok(to_json(&points))
}

#[wasm_bindgen]
pub fn propagation(x: &str, w1: &str, w2: &str, entries: &str) -> std::result::Result<String, JsValue> {
    js(propagation_json(x, w1, w2, entries))
}

#[wasm_bindgen(js_name = prunePreview)]
pub fn prune_preview(seed: u32, width: usize, sparsity: f64) -> std::result::Result<String, JsValue> {
    js(prune_preview_json(seed.into(), width, sparsity))
}

#[wasm_bindgen(js_name = pbsSweep)]
pub fn pbs_sweep(seed: u32, width: usize, sparsity: f64, max_rank: usize, lambda: f64) -> std::result::Result<String, JsValue> {
    js(pbs_sweep_json(seed.into(), width, sparsity, max_rank, lambda))
}

//! How models, masks, scores and adapter updates are laid out inside containers.
//!
//! A model container holds `layer.<i>.base_w`, `layer.<i>.adapter_b` and
//! `layer.<i>.adapter_a` as `f64`, optionally `layer.<i>.mask` as `u8`, and metadata
//! `activations` (comma separated, one per gap between layers) and `layer.<i>.scale`.
//! Layers always form a plain chain.

use std::collections::BTreeMap;

use xpert_core::{Activation, LoraLinear, Matrix, ToyModel};

use crate::container::{Container, ContainerError, Tensor};
use crate::CliError;

pub fn tensor_name(layer: usize, part: &str) -> String {
    format!("layer.{layer}.{part}")
}

/// Layer indices present in a container for tensors named `layer.<i>.<part>`.
pub fn layers_with(container: &Container, part: &str) -> Vec<usize> {
    let suffix = format!(".{part}");
    let mut layers: Vec<usize> = container
        .tensors
        .keys()
        .filter_map(|k| k.strip_prefix("layer.")?.strip_suffix(suffix.as_str())?.parse().ok())
        .collect();
    layers.sort_unstable();
    layers
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
    }
}

fn parse_activation(s: &str) -> Result<Activation, CliError> {
    match s {
        "identity" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        other => Err(CliError::Container(ContainerError::MalformedHeader(format!(
            "unknown activation {other:?}"
        )))),
    }
}

pub fn model_to_container(model: &ToyModel) -> Container {
    let mut c = Container::new();
    for (i, layer) in model.layers().iter().enumerate() {
        c.insert(tensor_name(i, "base_w"), Tensor::f64(layer.base_w().clone()));
        c.insert(tensor_name(i, "adapter_b"), Tensor::f64(layer.adapter_b().clone()));
        c.insert(tensor_name(i, "adapter_a"), Tensor::f64(layer.adapter_a().clone()));
        if let Some(mask) = layer.mask() {
            c.insert(tensor_name(i, "mask"), Tensor::mask(mask.clone()));
        }
        c.metadata.insert(tensor_name(i, "scale"), layer.scale().to_string());
    }
    let acts: Vec<&str> = model.activations().iter().map(|a| activation_name(*a)).collect();
    c.metadata.insert("activations".into(), acts.join(","));
    c
}

pub fn model_from_container(c: &Container) -> Result<ToyModel, CliError> {
    let layers_idx = layers_with(c, "base_w");
    if layers_idx.is_empty() {
        return Err(CliError::Container(ContainerError::MissingTensor {
            name: "layer.0.base_w".into(),
        }));
    }
    let mut layers = Vec::with_capacity(layers_idx.len());
    for (expected, &i) in layers_idx.iter().enumerate() {
        if i != expected {
            return Err(CliError::Container(ContainerError::MissingTensor {
                name: tensor_name(expected, "base_w"),
            }));
        }
        let scale_key = tensor_name(i, "scale");
        let scale: f64 = match c.metadata.get(&scale_key) {
            Some(s) => s.parse().map_err(|_| {
                CliError::Container(ContainerError::MalformedHeader(format!("{scale_key} = {s:?} is not a number")))
            })?,
            None => xpert_core::model::DEFAULT_LORA_SCALE,
        };
        let mut layer = LoraLinear::new(
            c.get(&tensor_name(i, "base_w"))?.clone(),
            c.get(&tensor_name(i, "adapter_b"))?.clone(),
            c.get(&tensor_name(i, "adapter_a"))?.clone(),
            scale,
        )
        .map_err(|e| e.context(format!("layer {i}")))?;
        if let Ok(mask) = c.get(&tensor_name(i, "mask")) {
            layer.set_mask(mask.clone()).map_err(|e| e.context(format!("layer {i} mask")))?;
        }
        layers.push(layer);
    }
    let activations = match c.metadata.get("activations").map(String::as_str) {
        None | Some("") => vec![],
        Some(list) => list.split(',').map(parse_activation).collect::<Result<_, _>>()?,
    };
    Ok(ToyModel::chain(layers, activations)?)
}

/// Tensors `layer.<i>.<part>` keyed by layer index.
pub fn per_layer(c: &Container, part: &str) -> Result<BTreeMap<usize, Matrix>, CliError> {
    layers_with(c, part)
        .into_iter()
        .map(|i| Ok((i, c.get(&tensor_name(i, part))?.clone())))
        .collect()
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::densenet::{ArchitectureConfig, LayerKind, Model};

/// Split of the ordered layer list: shallow = `[0, boundary)`, deep = `[boundary, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    pub boundary: usize,
    pub layer_count: usize,
    pub shallow: Vec<String>,
    pub deep: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("boundary {boundary} outside 0..={layers}")]
pub struct BoundaryError {
    pub boundary: usize,
    pub layers: usize,
}

/// Stem plus the first dense block.
pub fn default_boundary(config: &ArchitectureConfig) -> usize {
    1 + config.blocks.first().copied().unwrap_or(0)
}

pub fn partition_layers(model: &Model, boundary: usize) -> Result<LayerPartition, BoundaryError> {
    let layers = model.layers();
    if boundary > layers.len() {
        return Err(BoundaryError {
            boundary,
            layers: layers.len(),
        });
    }
    let names = |r: &[crate::densenet::Layer]| r.iter().map(|l| l.plan.name.clone()).collect();
    Ok(LayerPartition {
        boundary,
        layer_count: layers.len(),
        shallow: names(&layers[..boundary]),
        deep: names(&layers[boundary..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    All,
    Shallow,
    Deep,
    HeadOnly,
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "shallow" => Ok(Self::Shallow),
            "deep" => Ok(Self::Deep),
            "head-only" => Ok(Self::HeadOnly),
            _ => Err(format!("unknown selector {s:?} (all, shallow, deep, head-only)")),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Shallow => "shallow",
            Self::Deep => "deep",
            Self::HeadOnly => "head-only",
        })
    }
}

impl Selector {
    fn selects(self, layer_index: usize, kind: LayerKind, partition: &LayerPartition) -> bool {
        match self {
            Self::All => true,
            Self::Shallow => layer_index < partition.boundary,
            Self::Deep => layer_index >= partition.boundary,
            Self::HeadOnly => kind == LayerKind::Head,
        }
    }
}

/// Sets `trainable = flag` on exactly the parameters of the selected layers.
pub fn set_trainable(model: &mut Model, selector: Selector, partition: &LayerPartition, flag: bool) {
    let ranges: Vec<_> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(i, l)| selector.selects(*i, l.plan.kind, partition))
        .map(|(_, l)| l.params.clone())
        .collect();
    for r in ranges {
        for p in &mut model.params[r] {
            p.trainable = flag;
        }
    }
}

/// Freezes everything, then unfreezes the selection.
pub fn train_only(model: &mut Model, selector: Selector, partition: &LayerPartition) {
    set_trainable(model, Selector::All, partition, false);
    set_trainable(model, selector, partition, true);
}

/// Outcome of a partial weight transplant.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransplantReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Copies checkpoint tensors (parameters and running statistics) into `model`
/// wherever the name passes `filter` and the shapes agree. Names present on both
/// sides with different shapes keep the model's fresh values and are reported as
/// reinitialized; filtered-out or one-sided names are skipped.
pub fn load_partial(ckpt: &Checkpoint, model: &mut Model, filter: impl Fn(&str) -> bool) -> TransplantReport {
    let mut report = TransplantReport::default();
    for p in &mut model.params {
        if !filter(&p.name) {
            report.skipped.push(p.name.clone());
            continue;
        }
        match ckpt.tensors.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                report.loaded.push(p.name.clone());
            }
            Some(_) => report.reinitialized.push(p.name.clone()),
            None => report.skipped.push(p.name.clone()),
        }
    }
    for (name, current) in model.buffer_tensors() {
        if !filter(&name) {
            report.skipped.push(name);
            continue;
        }
        match ckpt.buffers.get(&name) {
            Some(t) if t.shape() == current.shape() => {
                model.set_buffer(&name, t.data());
                report.loaded.push(name);
            }
            Some(_) => report.reinitialized.push(name),
            None => report.skipped.push(name),
        }
    }
    let known: std::collections::HashSet<String> = model
        .params
        .iter()
        .map(|p| p.name.clone())
        .chain(model.buffer_tensors().into_iter().map(|(n, _)| n))
        .collect();
    for name in ckpt.tensors.keys().chain(ckpt.buffers.keys()) {
        if !known.contains(name) {
            report.skipped.push(name.clone());
        }
    }
    report.loaded.sort();
    report.skipped.sort();
    report.reinitialized.sort();
    report
}

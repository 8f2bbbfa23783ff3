//! Versioned JSON model checkpoints.
//!
//! Weight arrays are stored row-major as full-precision decimals, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::{CrfParams, EmissionMode};
use crate::error::{Error, Result};
use crate::network::{Architecture, DualCnn, LossKind};
use crate::network::layers::Cnn;
use crate::signal::NormalizationStats;
use crate::train::{write_atomic, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;
const ACTIVATION: &str = "softplus";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    appliance: String,
    loss: LossKind,
    architecture: Architecture,
    num_states: usize,
    /// Nonnegativity activation on the power network output.
    power_activation: String,
    power_scale: f64,
    normalization: NormalizationStats,
    state_centers: Vec<f64>,
    inference_stride: usize,
    emission: EmissionMode,
    state_net: Cnn,
    power_net: Cnn,
    crf: Option<CrfParams>,
}

pub fn to_json(model: &TrainedModel) -> Result<String> {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        appliance: model.appliance.clone(),
        loss: model.loss_kind(),
        architecture: model.net.arch.clone(),
        num_states: model.net.num_states(),
        power_activation: ACTIVATION.into(),
        power_scale: model.net.power_scale,
        normalization: model.norm,
        state_centers: model.centers.clone(),
        inference_stride: model.inference_stride,
        emission: model.emission,
        state_net: model.net.state_net.clone(),
        power_net: model.net.power_net.clone(),
        crf: model.crf.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<TrainedModel> {
    let f: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if f.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            f.format_version
        )));
    }
    if f.power_activation != ACTIVATION {
        return Err(Error::Checkpoint(format!("unknown power activation '{}'", f.power_activation)));
    }
    let m = f.architecture.num_states;
    let outputs = f.architecture.output_len * m;
    let consistent = f.num_states == m
        && f.state_centers.len() == m
        && f.inference_stride >= 1
        && [&f.state_net, &f.power_net]
            .iter()
            .all(|n| n.input_len == f.architecture.input_len && n.num_outputs() == outputs && n.is_well_formed())
        && f.crf.as_ref().map_or(true, |c| c.is_well_formed(m))
        && (f.loss == LossKind::MsdcCrf) == f.crf.is_some();
    if !consistent {
        return Err(Error::Checkpoint("checkpoint fields are mutually inconsistent".into()));
    }
    let net = DualCnn {
        arch: f.architecture,
        state_net: f.state_net,
        power_net: f.power_net,
        power_scale: f.power_scale,
    };
    if !net.is_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(TrainedModel {
        appliance: f.appliance,
        net,
        crf: f.crf,
        emission: f.emission,
        norm: f.normalization,
        centers: f.state_centers,
        inference_stride: f.inference_stride,
    })
}

/// Atomic write (temp file, then rename).
pub fn save(path: &Path, model: &TrainedModel) -> Result<()> {
    write_atomic(path, to_json(model)?.as_bytes())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

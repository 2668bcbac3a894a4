//! Evaluation, fairness statistics, and communication/computation
//! accounting.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, supervised_loss, Batch, ClientModel};

/// Model parameters are transmitted as 32-bit floats.
pub const BITS_PER_FLOAT: u64 = 32;

/// Training method selector, shared by the round loop and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sfmtl,
    Fedavg,
    Fedu,
    Local,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Sfmtl => "sfmtl",
            Method::Fedavg => "fedavg",
            Method::Fedu => "fedu",
            Method::Local => "local",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfmtl" => Ok(Method::Sfmtl),
            "fedavg" => Ok(Method::Fedavg),
            "fedu" => Ok(Method::Fedu),
            "local" => Ok(Method::Local),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected sfmtl, fedavg, fedu, or local)"
            ))),
        }
    }
}

/// Argmax accuracy and mean cross-entropy of a model on one test set.
pub fn accuracy_and_loss(
    model: &ClientModel,
    inputs: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let batch = Batch::new(inputs.clone(), labels.to_vec())?;
    let pass = forward(model, &batch)?;
    let loss = supervised_loss(&pass.logits, labels)?;
    let mut correct = 0usize;
    for (row, &label) in pass.logits.rows().into_iter().zip(labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, c);
            }
        }
        if best.1 == label {
            correct += 1;
        }
    }
    Ok((correct as f64 / labels.len() as f64, loss))
}

/// Distribution of per-client test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    /// Mean accuracy of the worst ⌈0.1·K⌉ clients.
    pub worst_10: f64,
    /// Mean accuracy of the worst ⌈0.2·K⌉ clients.
    pub worst_20: f64,
}

fn worst_fraction_mean(sorted_asc: &[f64], fraction: f64) -> f64 {
    let k = ((fraction * sorted_asc.len() as f64).ceil() as usize).max(1);
    let k = k.min(sorted_asc.len());
    sorted_asc[..k].iter().sum::<f64>() / k as f64
}

pub fn fairness_stats(accuracies: &[f64]) -> Result<FairnessReport> {
    if accuracies.is_empty() {
        return Err(Error::Input("fairness statistics need at least one accuracy".into()));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    Ok(FairnessReport {
        mean,
        std_dev: var.sqrt(),
        worst_10: worst_fraction_mean(&sorted, 0.1),
        worst_20: worst_fraction_mean(&sorted, 0.2),
    })
}

/// Floats a client uploads per round under the anchor+head scheme:
/// anchor rows (C_k × d_h) plus head weights (d_h × C_total) plus head bias.
pub fn anchor_head_uplink_floats(local_classes: usize, d_h: usize, c_total: usize) -> u64 {
    (local_classes * d_h + d_h * c_total + c_total) as u64
}

/// Floats a client downloads: the community anchor (its class count × d_h)
/// plus the server-updated head.
pub fn anchor_head_downlink_floats(anchor_classes: usize, d_h: usize, c_total: usize) -> u64 {
    (anchor_classes * d_h + d_h * c_total + c_total) as u64
}

/// One round participant, as seen by the accounting.
#[derive(Debug, Clone, Copy)]
pub struct ParticipantComm {
    /// C_k: the client's local class count (uplink anchor rows).
    pub local_classes: usize,
    /// Class count of the community anchor received this round, if any.
    pub downlink_anchor_classes: Option<usize>,
    /// Full model parameter count (used by full-model methods).
    pub model_params: usize,
    /// Whether a full-model method sends this client a model this round.
    pub receives_model: bool,
}

/// Total (uplink, downlink) bits for one round.
pub fn comm_cost(
    method: Method,
    participants: &[ParticipantComm],
    d_h: usize,
    c_total: usize,
) -> (u64, u64) {
    let mut up = 0u64;
    let mut down = 0u64;
    for p in participants {
        match method {
            Method::Sfmtl => {
                up += BITS_PER_FLOAT * anchor_head_uplink_floats(p.local_classes, d_h, c_total);
                if let Some(classes) = p.downlink_anchor_classes {
                    down +=
                        BITS_PER_FLOAT * anchor_head_downlink_floats(classes, d_h, c_total);
                }
            }
            Method::Fedavg | Method::Fedu => {
                up += BITS_PER_FLOAT * p.model_params as u64;
                if p.receives_model {
                    down += BITS_PER_FLOAT * p.model_params as u64;
                }
            }
            Method::Local => {}
        }
    }
    (up, down)
}

/// Crude per-client FLOP estimate for one round of local training:
/// 2 FLOPs per multiply-add, forward+backward ≈ 3 forwards, over every
/// sample in every epoch. An estimate, not a measurement.
pub fn flops_estimate(layer_dims: &[(usize, usize)], samples: usize, epochs: usize) -> f64 {
    let mads: usize = layer_dims.iter().map(|&(i, o)| i * o).sum();
    2.0 * 3.0 * mads as f64 * samples as f64 * epochs as f64
}

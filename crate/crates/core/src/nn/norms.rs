use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{BlockKey, BlockKind, Parameterized};
use crate::error::{Error, Result};

/// Which blocks enter a weight norm. Biases are excluded by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    WeightsOnly,
    WeightsAndBiases,
}

/// L2 norm of every selected block (trainable or frozen), flattened in key order.
pub fn weight_norm<P: Parameterized + ?Sized>(net: &P, scope: NormScope) -> f64 {
    let mut acc = 0.0;
    for (key, _) in net.block_keys() {
        if scope == NormScope::WeightsOnly && key.kind == BlockKind::Bias {
            continue;
        }
        if let Some(b) = net.block(key) {
            acc += b.iter().map(|w| w * w).sum::<f64>();
        }
    }
    acc.sqrt()
}

/// Gradient of `λ·Σw²` over trainable weight blocks (biases excluded).
pub fn l2_penalty_grads<P: Parameterized + ?Sized>(
    net: &P,
    lambda: f64,
) -> Result<BTreeMap<BlockKey, Vec<f64>>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("l2 coefficient must be >= 0, got {lambda}")));
    }
    let mut out = BTreeMap::new();
    for (key, trainable) in net.block_keys() {
        if !trainable || key.kind != BlockKind::Weight {
            continue;
        }
        if let Some(b) = net.block(key) {
            out.insert(key, b.iter().map(|w| 2.0 * lambda * w).collect());
        }
    }
    Ok(out)
}

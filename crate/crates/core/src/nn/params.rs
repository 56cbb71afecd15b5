use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// Which part of a (possibly injected) network a block belongs to.
///
/// A plain network and the encoder plus original head of an injected network
/// share the `Body` segment with the original layer indices, so keys stay
/// stable across an injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Body,
    Residual(usize),
    Correction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockKey {
    pub segment: Segment,
    pub layer: usize,
    pub kind: BlockKind,
}

impl BlockKey {
    pub fn body(layer: usize, kind: BlockKind) -> Self {
        Self {
            segment: Segment::Body,
            layer,
            kind,
        }
    }
}

impl std::fmt::Display for BlockKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let seg = match self.segment {
            Segment::Body => "body".to_string(),
            Segment::Residual(g) => format!("residual{g}"),
            Segment::Correction(g) => format!("correction{g}"),
        };
        let kind = match self.kind {
            BlockKind::Weight => "weight",
            BlockKind::Bias => "bias",
        };
        write!(f, "{seg}.layer{}.{kind}", self.layer)
    }
}

/// Parameter gradients keyed by block, plus the gradient w.r.t. the input.
///
/// Only trainable blocks ever appear in `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<BlockKey, Vec<f64>>,
    pub input: Tensor,
}

impl Gradients {
    pub fn get(&self, key: &BlockKey) -> Option<&[f64]> {
        self.params.get(key).map(Vec::as_slice)
    }

    /// Adds `other`'s parameter gradients into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &BTreeMap<BlockKey, Vec<f64>>) {
        for (k, g) in other {
            match self.params.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(*k, g.clone());
                }
            }
        }
    }
}

/// Uniform access to the parameter blocks of any network flavour.
pub trait Parameterized {
    /// All blocks in canonical key order with their trainability.
    fn block_keys(&self) -> Vec<(BlockKey, bool)>;

    fn block(&self, key: BlockKey) -> Option<&[f64]>;

    fn block_mut(&mut self, key: BlockKey) -> Option<&mut [f64]>;

    fn is_trainable(&self, key: BlockKey) -> bool {
        self.block_keys()
            .iter()
            .any(|(k, t)| *k == key && *t)
    }

    fn trainable_param_count(&self) -> usize {
        self.block_keys()
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(k, _)| self.block(k).map_or(0, <[f64]>::len))
            .sum()
    }

    fn total_param_count(&self) -> usize {
        self.block_keys()
            .into_iter()
            .map(|(k, _)| self.block(k).map_or(0, <[f64]>::len))
            .sum()
    }

    /// Concatenation of every block in key order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, _) in self.block_keys() {
            out.extend_from_slice(self.block(k).unwrap_or(&[]));
        }
        out
    }
}

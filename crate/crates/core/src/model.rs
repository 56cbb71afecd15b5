//! A network that is either plain or injected, plus the learner that pairs
//! it with its optimizer state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::injection::{InjectedCache, InjectedNetwork};
use crate::nn::{
    l2_penalty_grads, BlockKey, ForwardCache, Gradients, Network, Parameterized, RmsPropState,
    Segment,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyNetwork {
    Plain(Network),
    Injected(InjectedNetwork),
}

#[derive(Clone, Debug)]
pub enum AnyCache {
    Plain(ForwardCache),
    Injected(InjectedCache),
}

/// Shape-level description used to check that two networks are structural
/// mirrors of each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub segment: Segment,
    pub in_width: usize,
    pub out_width: usize,
    pub weight_trainable: bool,
    pub bias_trainable: bool,
    pub spectral: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureDescriptor {
    pub generations: usize,
    pub layers: Vec<LayerDescriptor>,
}

fn describe(net: &Network, segment: Segment, out: &mut Vec<LayerDescriptor>) {
    for l in net.layers() {
        out.push(LayerDescriptor {
            segment,
            in_width: l.in_width(),
            out_width: l.out_width(),
            weight_trainable: l.weight_trainable(),
            bias_trainable: l.bias_trainable(),
            spectral: l.is_spectral(),
        });
    }
}

impl From<Network> for AnyNetwork {
    fn from(n: Network) -> Self {
        AnyNetwork::Plain(n)
    }
}

impl From<InjectedNetwork> for AnyNetwork {
    fn from(n: InjectedNetwork) -> Self {
        AnyNetwork::Injected(n)
    }
}

impl AnyNetwork {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AnyCache)> {
        match self {
            AnyNetwork::Plain(n) => n.forward(x).map(|(y, c)| (y, AnyCache::Plain(c))),
            AnyNetwork::Injected(n) => n.forward(x).map(|(y, c)| (y, AnyCache::Injected(c))),
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &AnyCache, grad_output: &Tensor) -> Result<Gradients> {
        match (self, cache) {
            (AnyNetwork::Plain(n), AnyCache::Plain(c)) => n.backward(c, grad_output),
            (AnyNetwork::Injected(n), AnyCache::Injected(c)) => n.backward(c, grad_output),
            _ => Err(Error::Usage("forward cache belongs to a different network kind".into())),
        }
    }

    pub fn refresh_spectral(&mut self, iters: usize) {
        match self {
            AnyNetwork::Plain(n) => n.refresh_spectral(iters),
            AnyNetwork::Injected(n) => n.refresh_spectral(iters),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            AnyNetwork::Plain(n) => n.input_width(),
            AnyNetwork::Injected(n) => n.input_width(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            AnyNetwork::Plain(n) => n.output_width(),
            AnyNetwork::Injected(n) => n.output_width(),
        }
    }

    pub fn generation_count(&self) -> usize {
        match self {
            AnyNetwork::Plain(_) => 0,
            AnyNetwork::Injected(n) => n.generations().len(),
        }
    }

    pub fn as_plain(&self) -> Option<&Network> {
        match self {
            AnyNetwork::Plain(n) => Some(n),
            AnyNetwork::Injected(_) => None,
        }
    }

    pub fn architecture(&self) -> ArchitectureDescriptor {
        let mut layers = Vec::new();
        match self {
            AnyNetwork::Plain(n) => describe(n, Segment::Body, &mut layers),
            AnyNetwork::Injected(n) => {
                describe(n.encoder(), Segment::Body, &mut layers);
                describe(n.base_head(), Segment::Body, &mut layers);
                for (g, h) in n.generations().iter().enumerate() {
                    describe(h.residual(), Segment::Residual(g), &mut layers);
                    if let Some(c) = h.correction() {
                        describe(c, Segment::Correction(g), &mut layers);
                    }
                }
            }
        }
        ArchitectureDescriptor {
            generations: self.generation_count(),
            layers,
        }
    }
}

impl Parameterized for AnyNetwork {
    fn block_keys(&self) -> Vec<(BlockKey, bool)> {
        match self {
            AnyNetwork::Plain(n) => n.block_keys(),
            AnyNetwork::Injected(n) => n.block_keys(),
        }
    }

    fn block(&self, key: BlockKey) -> Option<&[f64]> {
        match self {
            AnyNetwork::Plain(n) => n.block(key),
            AnyNetwork::Injected(n) => n.block(key),
        }
    }

    fn block_mut(&mut self, key: BlockKey) -> Option<&mut [f64]> {
        match self {
            AnyNetwork::Plain(n) => n.block_mut(key),
            AnyNetwork::Injected(n) => n.block_mut(key),
        }
    }
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.values().len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.values().len());
    for (p, t) in pred.values().iter().zip(target.values()) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Network plus RMSProp state, trained one minibatch at a time.
#[derive(Clone, Debug)]
pub struct Learner {
    pub net: AnyNetwork,
    pub opt: RmsPropState,
    /// L2 coefficient added to trainable weight gradients.
    pub l2: f64,
}

impl Learner {
    pub fn new(net: impl Into<AnyNetwork>, opt: RmsPropState) -> Self {
        Self {
            net: net.into(),
            opt,
            l2: 0.0,
        }
    }

    /// One RMSProp step on an MSE regression batch; returns the pre-update loss.
    pub fn train_mse(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        self.net.refresh_spectral(1);
        let (pred, cache) = self.net.forward(x)?;
        let (loss, dpred) = mse_loss(&pred, y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence("non-finite training loss".into()));
        }
        let grads = self.net.backward(&cache, &dpred)?;
        self.apply(grads.params)?;
        Ok(loss)
    }

    /// Adds the L2 penalty (if any) and takes one optimizer step.
    pub fn apply(&mut self, mut grads: BTreeMap<BlockKey, Vec<f64>>) -> Result<()> {
        if self.l2 > 0.0 {
            for (k, p) in l2_penalty_grads(&self.net, self.l2)? {
                if let Some(g) = grads.get_mut(&k) {
                    g.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                }
            }
        }
        self.opt.step_blocks(&mut self.net, &grads)
    }
}

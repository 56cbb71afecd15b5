use std::collections::BTreeMap;

use super::params::{BlockKey, Gradients, Parameterized};
use crate::error::{Error, Result};

/// RMSProp: `ν ← ρν + (1−ρ)g²`, then `w ← w − lr·g / (√ν + ε)`.
///
/// Accumulators are created lazily (zeros) the first time a block receives a
/// gradient and exist only for trainable blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub learning_rate: f64,
    pub decay_rho: f64,
    pub epsilon: f64,
    nu: BTreeMap<BlockKey, Vec<f64>>,
}

impl RmsPropState {
    pub fn new(learning_rate: f64, decay_rho: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&decay_rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {decay_rho}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self {
            learning_rate,
            decay_rho,
            epsilon,
            nu: BTreeMap::new(),
        })
    }

    pub fn nu(&self, key: &BlockKey) -> Option<&[f64]> {
        self.nu.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.nu.keys()
    }

    pub fn insert_nu(&mut self, key: BlockKey, nu: Vec<f64>) {
        self.nu.insert(key, nu);
    }

    pub fn remove_nu(&mut self, key: &BlockKey) -> Option<Vec<f64>> {
        self.nu.remove(key)
    }

    /// Drops accumulators matching `pred`, so those blocks restart from zero.
    pub fn reset_where(&mut self, mut pred: impl FnMut(&BlockKey) -> bool) {
        self.nu.retain(|k, _| !pred(k));
    }

    /// Drops accumulators of blocks that are missing, frozen or resized.
    pub fn retain_trainable<P: Parameterized + ?Sized>(&mut self, model: &P) {
        let live: BTreeMap<BlockKey, usize> = model
            .block_keys()
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(k, _)| (k, model.block(k).map_or(0, <[f64]>::len)))
            .collect();
        self.nu
            .retain(|k, v| live.get(k).is_some_and(|n| *n == v.len()));
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &Gradients) -> Result<()> {
        self.step_blocks(model, &grads.params)
    }

    pub fn step_blocks<P: Parameterized + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &BTreeMap<BlockKey, Vec<f64>>,
    ) -> Result<()> {
        for (key, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient in block {key}")));
            }
            let len = model
                .block(*key)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown block {key}")))?
                .len();
            if len != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {key} has {} entries, block has {len}",
                    g.len()
                )));
            }
            if !model.is_trainable(*key) {
                return Err(Error::Usage(format!("gradient supplied for frozen block {key}")));
            }
        }
        let (lr, rho, eps) = (self.learning_rate, self.decay_rho, self.epsilon);
        for (key, g) in grads {
            let nu = self.nu.entry(*key).or_insert_with(|| vec![0.0; g.len()]);
            let w = model.block_mut(*key).expect("checked above");
            for ((wi, ni), gi) in w.iter_mut().zip(nu.iter_mut()).zip(g) {
                *ni = rho * *ni + (1.0 - rho) * gi * gi;
                *wi -= lr * gi / (ni.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, BlockKind, DenseLayer, Network};
    use crate::tensor::Tensor;

    fn scalar_net(w: f64) -> Network {
        let l = DenseLayer::from_parts(1, 1, vec![w], vec![0.0], Activation::Identity).unwrap();
        let mut n = Network::new(1, vec![l]).unwrap();
        n.layer_mut(0).set_block_trainable(true, false);
        n
    }

    fn grads(g: f64) -> Gradients {
        let mut params = BTreeMap::new();
        params.insert(BlockKey::body(0, BlockKind::Weight), vec![g]);
        Gradients {
            params,
            input: Tensor::zeros(1, 1),
        }
    }

    #[test]
    fn hand_calculated_update() {
        let mut net = scalar_net(1.0);
        let mut opt = RmsPropState::new(0.01, 0.9, 1e-8).unwrap();
        opt.step(&mut net, &grads(1.0)).unwrap();
        let key = BlockKey::body(0, BlockKind::Weight);
        assert!((opt.nu(&key).unwrap()[0] - 0.1).abs() < 1e-15);
        let nu = opt.nu(&key).unwrap()[0];
        let expected = 1.0 - 0.01 / (nu.sqrt() + 1e-8);
        assert_eq!(net.layer(0).weight()[0], expected);
        assert!((expected - 0.968_377_23).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_only_decays_nu() {
        let mut net = scalar_net(0.7);
        let mut opt = RmsPropState::new(0.01, 0.9, 1e-8).unwrap();
        let key = BlockKey::body(0, BlockKind::Weight);
        opt.insert_nu(key, vec![0.5]);
        opt.step(&mut net, &grads(0.0)).unwrap();
        assert_eq!(net.layer(0).weight()[0], 0.7);
        assert_eq!(opt.nu(&key).unwrap()[0], 0.9 * 0.5);
    }

    #[test]
    fn nan_gradient_names_block() {
        let mut net = scalar_net(0.7);
        let mut opt = RmsPropState::new(0.01, 0.9, 1e-8).unwrap();
        let err = opt.step(&mut net, &grads(f64::NAN)).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("body.layer0.weight")),
            e => panic!("unexpected {e:?}"),
        }
        assert_eq!(net.layer(0).weight()[0], 0.7);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(RmsPropState::new(0.01, 1.0, 1e-8).is_err());
        assert!(RmsPropState::new(0.01, 0.9, 0.0).is_err());
        assert!(RmsPropState::new(-1.0, 0.9, 1e-8).is_err());
    }

    #[test]
    fn frozen_block_gradient_rejected() {
        let mut net = scalar_net(0.7);
        net.layer_mut(0).set_trainable(false);
        let mut opt = RmsPropState::new(0.01, 0.9, 1e-8).unwrap();
        assert!(matches!(opt.step(&mut net, &grads(1.0)), Err(Error::Usage(_))));
    }
}

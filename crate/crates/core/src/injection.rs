//! Plasticity injection.
//!
//! The network is split into an encoder `φ` (first `k` layers) and a head
//! `h_θ`. Injection freezes `θ`, draws a fresh `θ'` and keeps two copies of
//! it: a trainable residual head `θ'₁` and a frozen correction head `θ'₂`.
//! The output becomes
//!
//! ```text
//! h_θ(φ(x)) + Σ_g [ h_{θ'₁,g}(φ(x)) − h_{θ'₂,g}(φ(x)) ]
//! ```
//!
//! Evaluation order is fixed: the frozen original head first, then for each
//! generation in order `out ← out − (correction − residual)`. At injection
//! time `correction − residual` is exactly `+0.0`, and `x − (+0.0)` returns
//! `x` bit for bit for every finite `x` including `−0.0`, so predictions are
//! unchanged bitwise.
//!
//! Whole-network variants use an empty encoder and treat the full network as
//! the head; the copy-encoder variant seeds the new head's first `k` layers
//! with the current encoder values instead of fresh draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AnyNetwork;
use crate::nn::{
    BlockKey, DenseLayer, ForwardCache, Gradients, InitSpec, Network, Parameterized, RmsPropState,
    Segment,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionVariant {
    /// New head on the shared, still-trainable encoder.
    #[default]
    SharedEncoder,
    /// Injection applied to the entire network.
    WholeNet,
    /// Whole-network injection whose new copy starts from the current encoder.
    WholeNetCopyEncoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerStatePolicy {
    /// New residual head starts with zero accumulators.
    #[default]
    Fresh,
    /// New residual head inherits the accumulators of the head it replaces.
    CopyFromOldHead,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub split_k: usize,
    #[serde(default)]
    pub variant: InjectionVariant,
    #[serde(default = "yes")]
    pub freeze_old: bool,
    #[serde(default = "yes")]
    pub output_correction: bool,
    #[serde(default)]
    pub optimizer_state_policy: OptimizerStatePolicy,
}

impl InjectionConfig {
    pub fn shared(split_k: usize) -> Self {
        Self {
            split_k,
            variant: InjectionVariant::SharedEncoder,
            freeze_old: true,
            output_correction: true,
            optimizer_state_policy: OptimizerStatePolicy::Fresh,
        }
    }

    pub fn with_variant(mut self, variant: InjectionVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// One injection: a trainable residual head and its frozen initial copy.
///
/// Without output correction the copy is absent and the residual head adds
/// its raw output.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGeneration {
    residual: Network,
    correction: Option<Network>,
}

impl HeadGeneration {
    pub fn residual(&self) -> &Network {
        &self.residual
    }

    pub fn correction(&self) -> Option<&Network> {
        self.correction.as_ref()
    }

    pub fn output_correction(&self) -> bool {
        self.correction.is_some()
    }
}

/// Encoder, original head and the list of injected head generations.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectedNetwork {
    encoder: Network,
    base: Network,
    generations: Vec<HeadGeneration>,
    split_k: usize,
    variant: InjectionVariant,
}

#[derive(Clone, Debug)]
pub struct InjectedCache {
    encoder: ForwardCache,
    base: ForwardCache,
    generations: Vec<(ForwardCache, Option<ForwardCache>)>,
}

/// Whether frozen heads pass input gradients to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrozenFlow {
    Propagate,
    /// Ablation: drop the input-gradient contribution of fully frozen heads.
    Stop,
}

fn fresh_like(template: &Network, position_offset: usize, init: &InitSpec) -> Result<Network> {
    let layers = template
        .layers()
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let mut fresh = DenseLayer::initialized(
                position_offset + j,
                l.in_width(),
                l.out_width(),
                l.activation(),
                init,
            );
            if l.is_spectral() {
                fresh.enable_spectral();
            }
            fresh
        })
        .collect();
    Network::new(template.input_width(), layers)
}

fn frozen_copy(net: &Network) -> Network {
    let mut c = net.clone();
    c.set_trainable(false);
    c
}

impl InjectedNetwork {
    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn base_head(&self) -> &Network {
        &self.base
    }

    pub fn generations(&self) -> &[HeadGeneration] {
        &self.generations
    }

    pub fn split_k(&self) -> usize {
        self.split_k
    }

    pub fn variant(&self) -> InjectionVariant {
        self.variant
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.base.output_width()
    }

    fn first_injection(net: &Network, cfg: &InjectionConfig, init: &InitSpec) -> Result<Self> {
        let k = cfg.split_k;
        let (encoder, head) = net.split_at(k)?;
        let (encoder, mut base, residual) = match cfg.variant {
            InjectionVariant::SharedEncoder => {
                let residual = fresh_like(&head, k, init)?;
                (encoder, head, residual)
            }
            InjectionVariant::WholeNet => {
                let residual = fresh_like(net, 0, init)?;
                (Network::identity(net.input_width()), net.clone(), residual)
            }
            InjectionVariant::WholeNetCopyEncoder => {
                let mut enc_copy = encoder.clone();
                enc_copy.set_trainable(true);
                let residual = enc_copy.concat(&fresh_like(&head, k, init)?)?;
                (Network::identity(net.input_width()), net.clone(), residual)
            }
        };
        if cfg.freeze_old {
            base.set_trainable(false);
        }
        let correction = cfg.output_correction.then(|| frozen_copy(&residual));
        Ok(Self {
            encoder,
            base,
            generations: vec![HeadGeneration {
                residual,
                correction,
            }],
            split_k: k,
            variant: cfg.variant,
        })
    }

    fn reinject(&self, cfg: &InjectionConfig, init: &InitSpec) -> Result<Self> {
        if cfg.variant != self.variant || cfg.split_k != self.split_k {
            return Err(Error::Config(format!(
                "re-injection must reuse variant {:?} and split_k {}, got {:?} and {}",
                self.variant, self.split_k, cfg.variant, cfg.split_k
            )));
        }
        let mut next = self.clone();
        let template = next
            .generations
            .last()
            .expect("injected network has at least one generation")
            .residual
            .clone();
        if cfg.freeze_old {
            if let Some(g) = next.generations.last_mut() {
                g.residual.set_trainable(false);
            }
        }
        let k = self.split_k;
        let residual = match self.variant {
            InjectionVariant::SharedEncoder => fresh_like(&template, k, init)?,
            InjectionVariant::WholeNet => fresh_like(&template, 0, init)?,
            InjectionVariant::WholeNetCopyEncoder => {
                let (enc, head) = template.split_at(k)?;
                let mut enc = enc;
                enc.set_trainable(true);
                enc.concat(&fresh_like(&head, k, init)?)?
            }
        };
        let correction = cfg.output_correction.then(|| frozen_copy(&residual));
        next.generations.push(HeadGeneration {
            residual,
            correction,
        });
        Ok(next)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, InjectedCache)> {
        let (z, enc_cache) = self.encoder.forward(x)?;
        let (mut out, base_cache) = self.base.forward(&z)?;
        let mut gen_caches = Vec::with_capacity(self.generations.len());
        for g in &self.generations {
            let (r, rc) = g.residual.forward(&z)?;
            match &g.correction {
                Some(corr) => {
                    let (c, cc) = corr.forward(&z)?;
                    for ((o, ci), ri) in out.values_mut().iter_mut().zip(c.values()).zip(r.values()) {
                        *o -= ci - ri;
                    }
                    gen_caches.push((rc, Some(cc)));
                }
                None => {
                    for (o, ri) in out.values_mut().iter_mut().zip(r.values()) {
                        *o += ri;
                    }
                    gen_caches.push((rc, None));
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::Divergence("non-finite injected network output".into()));
        }
        Ok((
            out,
            InjectedCache {
                encoder: enc_cache,
                base: base_cache,
                generations: gen_caches,
            },
        ))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &InjectedCache, grad_output: &Tensor) -> Result<Gradients> {
        self.backward_with(cache, grad_output, FrozenFlow::Propagate)
    }

    /// Encoder gradients sum the input gradients of every head in evaluation
    /// order (original head, then residual and correction per generation).
    pub fn backward_with(
        &self,
        cache: &InjectedCache,
        grad_output: &Tensor,
        flow: FrozenFlow,
    ) -> Result<Gradients> {
        if cache.generations.len() != self.generations.len() {
            return Err(Error::Usage("stale injected cache: generation count changed".into()));
        }
        let offset = self.encoder.depth();
        let contributes = |net: &Network| flow == FrozenFlow::Propagate || net.trainable_param_count() > 0;

        let (mut params, base_dz) =
            self.base
                .backward_keyed(&cache.base, grad_output, Segment::Body, offset, true)?;
        let mut dz = if contributes(&self.base) {
            base_dz
        } else {
            Tensor::zeros(base_dz.rows(), base_dz.cols())
        };
        let negated = {
            let mut t = grad_output.clone();
            t.values_mut().iter_mut().for_each(|v| *v = -*v);
            t
        };
        for (gi, (g, (rc, cc))) in self.generations.iter().zip(&cache.generations).enumerate() {
            let (p, rdz) =
                g.residual
                    .backward_keyed(rc, grad_output, Segment::Residual(gi), 0, true)?;
            params.extend(p);
            if contributes(&g.residual) {
                add_into(&mut dz, &rdz);
            }
            if let (Some(corr), Some(cc)) = (&g.correction, cc) {
                let (p, cdz) = corr.backward_keyed(cc, &negated, Segment::Correction(gi), 0, true)?;
                params.extend(p);
                if contributes(corr) {
                    add_into(&mut dz, &cdz);
                }
            }
        }
        let (enc_params, input) =
            self.encoder
                .backward_keyed(&cache.encoder, &dz, Segment::Body, 0, true)?;
        params.extend(enc_params);
        Ok(Gradients { params, input })
    }

    pub fn refresh_spectral(&mut self, iters: usize) {
        self.encoder.refresh_spectral(iters);
        self.base.refresh_spectral(iters);
        for g in &mut self.generations {
            g.residual.refresh_spectral(iters);
        }
    }

    fn segment_net(&self, segment: Segment, layer: usize) -> Option<(&Network, usize)> {
        match segment {
            Segment::Body => {
                let e = self.encoder.depth();
                if layer < e {
                    Some((&self.encoder, layer))
                } else {
                    Some((&self.base, layer - e))
                }
            }
            Segment::Residual(g) => self.generations.get(g).map(|h| (&h.residual, layer)),
            Segment::Correction(g) => self
                .generations
                .get(g)
                .and_then(|h| h.correction.as_ref())
                .map(|c| (c, layer)),
        }
    }

    /// Residual head of the newest generation.
    pub fn newest_residual(&self) -> &Network {
        &self
            .generations
            .last()
            .expect("injected network has at least one generation")
            .residual
    }
}

fn add_into(acc: &mut Tensor, x: &Tensor) {
    for (a, b) in acc.values_mut().iter_mut().zip(x.values()) {
        *a += b;
    }
}

impl Parameterized for InjectedNetwork {
    fn block_keys(&self) -> Vec<(BlockKey, bool)> {
        let mut keys = self.encoder.keys_with(Segment::Body, 0);
        keys.extend(self.base.keys_with(Segment::Body, self.encoder.depth()));
        for (g, h) in self.generations.iter().enumerate() {
            keys.extend(h.residual.keys_with(Segment::Residual(g), 0));
            if let Some(c) = &h.correction {
                keys.extend(c.keys_with(Segment::Correction(g), 0));
            }
        }
        keys
    }

    fn block(&self, key: BlockKey) -> Option<&[f64]> {
        let (net, l) = self.segment_net(key.segment, key.layer)?;
        net.local_block(l, key.kind)
    }

    fn block_mut(&mut self, key: BlockKey) -> Option<&mut [f64]> {
        let e = self.encoder.depth();
        match key.segment {
            Segment::Body if key.layer < e => self.encoder.local_block_mut(key.layer, key.kind),
            Segment::Body => self.base.local_block_mut(key.layer - e, key.kind),
            Segment::Residual(g) => self
                .generations
                .get_mut(g)?
                .residual
                .local_block_mut(key.layer, key.kind),
            Segment::Correction(g) => self
                .generations
                .get_mut(g)?
                .correction
                .as_mut()?
                .local_block_mut(key.layer, key.kind),
        }
    }
}

/// Applies one injection to a plain or already injected network.
pub fn inject(net: &AnyNetwork, cfg: &InjectionConfig, init: &InitSpec) -> Result<InjectedNetwork> {
    match net {
        AnyNetwork::Plain(n) => {
            if n.depth() == 0 || cfg.split_k > n.depth() - 1 {
                return Err(Error::Config(format!(
                    "split_k {} outside [0, {}]",
                    cfg.split_k,
                    n.depth().saturating_sub(1)
                )));
            }
            InjectedNetwork::first_injection(n, cfg, init)
        }
        AnyNetwork::Injected(inet) => inet.reinject(cfg, init),
    }
}

/// Injection together with the optimizer-state bookkeeping: encoder state
/// is carried over, frozen blocks lose their accumulators and the new
/// residual head starts fresh or inherits the replaced head's accumulators.
pub fn inject_with_optimizer(
    net: &mut AnyNetwork,
    opt: &mut RmsPropState,
    cfg: &InjectionConfig,
    init: &InitSpec,
) -> Result<()> {
    // the old trainable head, aligned with the new residual's local layers
    let old_head: Vec<(usize, Segment, usize)> = match &*net {
        AnyNetwork::Plain(n) => {
            let start = match cfg.variant {
                InjectionVariant::SharedEncoder => cfg.split_k,
                _ => 0,
            };
            (start..n.depth()).map(|l| (l - start, Segment::Body, l)).collect()
        }
        AnyNetwork::Injected(inet) => {
            let g = inet.generations().len() - 1;
            (0..inet.newest_residual().depth())
                .map(|l| (l, Segment::Residual(g), l))
                .collect()
        }
    };
    let injected = inject(net, cfg, init)?;
    let new_gen = injected.generations().len() - 1;
    let mut inherited = Vec::new();
    if cfg.optimizer_state_policy == OptimizerStatePolicy::CopyFromOldHead {
        for (local, seg, old_layer) in old_head {
            for kind in [crate::nn::BlockKind::Weight, crate::nn::BlockKind::Bias] {
                let old = BlockKey {
                    segment: seg,
                    layer: old_layer,
                    kind,
                };
                if let Some(nu) = opt.nu(&old) {
                    inherited.push((
                        BlockKey {
                            segment: Segment::Residual(new_gen),
                            layer: local,
                            kind,
                        },
                        nu.to_vec(),
                    ));
                }
            }
        }
    }
    *net = AnyNetwork::Injected(injected);
    opt.retain_trainable(&*net);
    for (k, nu) in inherited {
        opt.insert_nu(k, nu);
    }
    opt.retain_trainable(&*net);
    Ok(())
}

/// Latching trigger that fires once the weight norm exceeds `factor·‖w₀‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveTriggerState {
    pub w0_norm: f64,
    pub factor: f64,
    pub fired: bool,
}

impl AdaptiveTriggerState {
    pub const DEFAULT_FACTOR: f64 = 3.0;

    pub fn new(w0_norm: f64, factor: f64) -> Result<Self> {
        if !(w0_norm > 0.0) {
            return Err(Error::Config(format!("initial weight norm must be > 0, got {w0_norm}")));
        }
        if !(factor > 0.0) {
            return Err(Error::Config(format!("trigger factor must be > 0, got {factor}")));
        }
        Ok(Self {
            w0_norm,
            factor,
            fired: false,
        })
    }

    pub fn with_default_factor(w0_norm: f64) -> Result<Self> {
        Self::new(w0_norm, Self::DEFAULT_FACTOR)
    }

    /// True exactly once: the first time `current_norm > factor·w0_norm`.
    pub fn observe(&mut self, current_norm: f64) -> bool {
        if self.fired || !(current_norm > self.factor * self.w0_norm) {
            return false;
        }
        self.fired = true;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormScope;

    fn net(seed: u64) -> Network {
        Network::mlp(&[5, 8, 7, 3], &InitSpec::he_uniform(seed)).unwrap()
    }

    fn probe(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let v = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn split_k_out_of_range() {
        let n = AnyNetwork::Plain(net(1));
        let err = inject(&n, &InjectionConfig::shared(3), &InitSpec::he_uniform(2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn shared_injection_preserves_outputs_and_count() {
        let plain = net(1);
        let x = probe(16, 5, 3);
        let before = plain.predict(&x).unwrap();
        let any = AnyNetwork::Plain(plain.clone());
        let inet = inject(&any, &InjectionConfig::shared(1), &InitSpec::he_uniform(9)).unwrap();
        assert!(inet.predict(&x).unwrap().bitwise_eq(&before));
        assert_eq!(inet.trainable_param_count(), plain.trainable_param_count());
        let g = &inet.generations()[0];
        assert_eq!(g.residual().flat_params(), g.correction().unwrap().flat_params());
    }

    #[test]
    fn reinjection_rejects_variant_change() {
        let any = AnyNetwork::Plain(net(1));
        let inet = inject(&any, &InjectionConfig::shared(1), &InitSpec::he_uniform(9)).unwrap();
        let cfg = InjectionConfig::shared(1).with_variant(InjectionVariant::WholeNet);
        assert!(inject(&AnyNetwork::Injected(inet), &cfg, &InitSpec::he_uniform(10)).is_err());
    }

    #[test]
    fn no_output_correction_adds_raw_residual() {
        let plain = net(4);
        let x = probe(8, 5, 5);
        let before = plain.predict(&x).unwrap();
        let mut cfg = InjectionConfig::shared(1);
        cfg.output_correction = false;
        let inet = inject(&AnyNetwork::Plain(plain.clone()), &cfg, &InitSpec::he_uniform(6)).unwrap();
        let after = inet.predict(&x).unwrap();
        let (enc, _) = plain.split_at(1).unwrap();
        let r = inet.generations()[0]
            .residual()
            .predict(&enc.predict(&x).unwrap())
            .unwrap();
        for ((a, b), ri) in after.values().iter().zip(before.values()).zip(r.values()) {
            assert_eq!(*a, b + ri);
            assert!(((a - b) - ri).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_policy_moves_head_accumulators() {
        let mut any = AnyNetwork::Plain(net(2));
        let mut opt = RmsPropState::new(1e-3, 0.9, 1e-8).unwrap();
        let x = probe(4, 5, 1);
        let (y, cache) = any.forward(&x).unwrap();
        let g = any.backward(&cache, &y).unwrap();
        opt.step(&mut any, &g).unwrap();
        let head_w = BlockKey::body(1, crate::nn::BlockKind::Weight);
        let enc_w = BlockKey::body(0, crate::nn::BlockKind::Weight);
        let old_head_nu = opt.nu(&head_w).unwrap().to_vec();
        let enc_nu = opt.nu(&enc_w).unwrap().to_vec();
        let mut cfg = InjectionConfig::shared(1);
        cfg.optimizer_state_policy = OptimizerStatePolicy::CopyFromOldHead;
        inject_with_optimizer(&mut any, &mut opt, &cfg, &InitSpec::he_uniform(3)).unwrap();
        assert!(opt.nu(&head_w).is_none());
        assert_eq!(opt.nu(&enc_w).unwrap(), enc_nu.as_slice());
        let new_w = BlockKey {
            segment: Segment::Residual(0),
            layer: 0,
            kind: crate::nn::BlockKind::Weight,
        };
        assert_eq!(opt.nu(&new_w).unwrap(), old_head_nu.as_slice());
        assert!(opt.keys().all(|k| any.is_trainable(*k)));
    }

    #[test]
    fn trigger_latches() {
        let mut t = AdaptiveTriggerState::with_default_factor(1.0).unwrap();
        assert_eq!(t.factor, 3.0);
        assert!(!t.observe(2.9));
        assert!(t.observe(3.01));
        assert!(!t.observe(3.5));
        assert!(!t.observe(10.0));
        assert!(AdaptiveTriggerState::new(0.0, 3.0).is_err());
    }

    #[test]
    fn weight_norm_counts_frozen_heads() {
        let any = AnyNetwork::Plain(net(1));
        let before = crate::nn::weight_norm(&any, NormScope::WeightsOnly);
        let inet = inject(&any, &InjectionConfig::shared(1), &InitSpec::he_uniform(9)).unwrap();
        assert!(crate::nn::weight_norm(&inet, NormScope::WeightsOnly) > before);
    }
}

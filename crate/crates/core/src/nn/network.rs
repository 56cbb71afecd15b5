use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::init::InitSpec;
use super::layer::{Activation, DenseLayer};
use super::params::{BlockKey, BlockKind, Gradients, Parameterized, Segment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Ordered stack of dense layers.
///
/// A network with zero layers is the identity map on `input_width` and is
/// used as the empty encoder of whole-network injection.
#[derive(Clone, Debug)]
pub struct Network {
    input_width: usize,
    layers: Vec<DenseLayer>,
    // changes on every parameter mutation; caches remember it
    revision: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_width == other.input_width && self.layers == other.layers
    }
}

/// Per-layer values kept by the forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: Tensor,
    pub pre: Tensor,
    pub sigma: Option<f64>,
    effective_weight: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    revision: u64,
    pub layers: Vec<LayerCache>,
    output_shape: Vec<usize>,
}

/// Allocates and initializes a network; every block starts trainable.
pub fn build_network(widths: &[usize], activations: &[Activation], init: &InitSpec) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least 2 widths, got {}",
            widths.len()
        )));
    }
    if let Some(w) = widths.iter().position(|w| *w == 0) {
        return Err(Error::Config(format!("width at position {w} must be positive")));
    }
    if activations.len() != widths.len() - 1 {
        return Err(Error::Config(format!(
            "{} layers need {} activations, got {}",
            widths.len() - 1,
            widths.len() - 1,
            activations.len()
        )));
    }
    let layers = widths
        .windows(2)
        .zip(activations)
        .enumerate()
        .map(|(l, (w, act))| DenseLayer::initialized(l, w[0], w[1], *act, init))
        .collect();
    Network::new(widths[0], layers)
}

impl Network {
    pub fn new(input_width: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let mut width = input_width;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_width() != width {
                return Err(Error::Dimension(format!(
                    "layer {l} expects input width {} but receives {width}",
                    layer.in_width()
                )));
            }
            width = layer.out_width();
        }
        Ok(Self {
            input_width,
            layers,
            revision: fresh_revision(),
        })
    }

    /// ReLU hidden layers, identity output layer.
    pub fn mlp(widths: &[usize], init: &InitSpec) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n)
            .map(|l| if l + 1 == n { Activation::Identity } else { Activation::Relu })
            .collect();
        build_network(widths, &acts, init)
    }

    pub fn identity(width: usize) -> Self {
        Self {
            input_width: width,
            layers: Vec::new(),
            revision: fresh_revision(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, DenseLayer::out_width)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width)
            .chain(self.layers.iter().map(DenseLayer::out_width))
            .collect()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &DenseLayer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut DenseLayer {
        self.revision = fresh_revision();
        &mut self.layers[i]
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.revision = fresh_revision();
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer> {
        self.layers
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for l in self.layers_mut() {
            l.set_trainable(trainable);
        }
    }

    pub fn enable_spectral(&mut self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Config(format!(
                "spectral normalization requested on layer {layer} of a depth-{} network",
                self.layers.len()
            )));
        }
        self.layer_mut(layer).enable_spectral();
        Ok(())
    }

    /// Spectral normalization on the second-to-last layer.
    pub fn enable_spectral_penultimate(&mut self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::Config("penultimate layer needs depth >= 2".into()));
        }
        self.enable_spectral(self.depth() - 2)
    }

    /// Advances power iteration on spectrally normalized layers whose weight
    /// is trainable. Frozen layers keep their vectors, so a frozen network
    /// stays a fixed function.
    pub fn refresh_spectral(&mut self, iters: usize) {
        if self
            .layers
            .iter()
            .any(|l| l.is_spectral() && l.weight_trainable())
        {
            for l in self.layers_mut() {
                if l.weight_trainable() {
                    l.refresh_spectral(iters);
                }
            }
        }
    }

    /// Clones of layers `[..k]` and `[k..]` as two networks.
    pub fn split_at(&self, k: usize) -> Result<(Network, Network)> {
        if k > self.depth() {
            return Err(Error::Config(format!(
                "split point {k} exceeds depth {}",
                self.depth()
            )));
        }
        let head_in = if k == 0 {
            self.input_width
        } else {
            self.layers[k - 1].out_width()
        };
        Ok((
            Network::new(self.input_width, self.layers[..k].to_vec())?,
            Network::new(head_in, self.layers[k..].to_vec())?,
        ))
    }

    /// Stacks `self` then `tail`.
    pub fn concat(&self, tail: &Network) -> Result<Network> {
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().cloned());
        Network::new(self.input_width, layers)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if x.shape().len() != 2 || x.cols() != self.input_width {
            return Err(Error::Dimension(format!(
                "network expects [n x {}] input, got {:?}",
                self.input_width,
                x.shape()
            )));
        }
        let n = x.rows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let sigma = layer.sigma();
            let w_eff = layer.effective_weight();
            let (in_w, out_w) = (layer.in_width(), layer.out_width());
            let mut pre = vec![0.0; n * out_w];
            let mut post = vec![0.0; n * out_w];
            let xv = current.values();
            let b = layer.bias();
            let act = layer.activation();
            for r in 0..n {
                let xr = &xv[r * in_w..(r + 1) * in_w];
                for o in 0..out_w {
                    let wr = &w_eff[o * in_w..(o + 1) * in_w];
                    let acc = wr.iter().zip(xr).fold(0.0, |a, (w, xi)| a + w * xi);
                    let z = acc + b[o];
                    pre[r * out_w + o] = z;
                    post[r * out_w + o] = act.apply(z);
                }
            }
            let effective_weight = sigma.map(|_| w_eff.into_owned());
            let next = Tensor::matrix(n, out_w, post)?;
            caches.push(LayerCache {
                input: std::mem::replace(&mut current, next),
                pre: Tensor::matrix(n, out_w, pre)?,
                sigma,
                effective_weight,
            });
        }
        if !current.is_finite() {
            return Err(Error::Divergence("non-finite network output".into()));
        }
        let cache = ForwardCache {
            revision: self.revision,
            layers: caches,
            output_shape: current.shape().to_vec(),
        };
        Ok((current, cache))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Gradients> {
        let (params, input) = self.backward_keyed(cache, grad_output, Segment::Body, 0, true)?;
        Ok(Gradients { params, input })
    }

    /// Backward pass emitting keys `(segment, layer_offset + l)`.
    ///
    /// When `want_input` is false and the first layer is frozen the returned
    /// input gradient is all zeros.
    pub(crate) fn backward_keyed(
        &self,
        cache: &ForwardCache,
        grad_output: &Tensor,
        segment: Segment,
        layer_offset: usize,
        want_input: bool,
    ) -> Result<(BTreeMap<BlockKey, Vec<f64>>, Tensor)> {
        if cache.revision != self.revision || cache.layers.len() != self.layers.len() {
            return Err(Error::Usage(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        if grad_output.shape() != cache.output_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_output.shape(),
                cache.output_shape
            )));
        }
        let n = grad_output.rows();
        let mut params = BTreeMap::new();
        let mut grad = grad_output.clone();
        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (in_w, out_w) = (layer.in_width(), layer.out_width());
            let act = layer.activation();
            let mut dpre = grad.into_values();
            for (d, z) in dpre.iter_mut().zip(lc.pre.values()) {
                *d *= act.derivative(*z);
            }
            let xv = lc.input.values();
            let w_eff: &[f64] = lc.effective_weight.as_deref().unwrap_or(layer.weight());
            if layer.weight_trainable() {
                let mut gw = vec![0.0; out_w * in_w];
                for r in 0..n {
                    let xr = &xv[r * in_w..(r + 1) * in_w];
                    for o in 0..out_w {
                        let d = dpre[r * out_w + o];
                        if d != 0.0 {
                            for (g, xi) in gw[o * in_w..(o + 1) * in_w].iter_mut().zip(xr) {
                                *g += d * xi;
                            }
                        }
                    }
                }
                if let (Some(sigma), Some(state)) = (lc.sigma, layer.spectral()) {
                    // W_eff = W / (uᵀWv):  dL/dW = (G - <G, W_eff> u vᵀ) / σ
                    let inner: f64 = gw.iter().zip(w_eff).map(|(g, w)| g * w).sum();
                    for o in 0..out_w {
                        for i in 0..in_w {
                            let g = &mut gw[o * in_w + i];
                            *g = (*g - inner * state.u[o] * state.v[i]) / sigma;
                        }
                    }
                }
                params.insert(
                    BlockKey {
                        segment,
                        layer: layer_offset + l,
                        kind: BlockKind::Weight,
                    },
                    gw,
                );
            }
            if layer.bias_trainable() {
                let mut gb = vec![0.0; out_w];
                for r in 0..n {
                    for (g, d) in gb.iter_mut().zip(&dpre[r * out_w..(r + 1) * out_w]) {
                        *g += d;
                    }
                }
                params.insert(
                    BlockKey {
                        segment,
                        layer: layer_offset + l,
                        kind: BlockKind::Bias,
                    },
                    gb,
                );
            }
            let mut dx = vec![0.0; n * in_w];
            if l > 0 || want_input {
                for r in 0..n {
                    let dxr = &mut dx[r * in_w..(r + 1) * in_w];
                    for o in 0..out_w {
                        let d = dpre[r * out_w + o];
                        if d != 0.0 {
                            for (g, w) in dxr.iter_mut().zip(&w_eff[o * in_w..(o + 1) * in_w]) {
                                *g += d * w;
                            }
                        }
                    }
                }
            }
            grad = Tensor::matrix(n, in_w, dx)?;
        }
        Ok((params, grad))
    }

    pub(crate) fn keys_with(&self, segment: Segment, offset: usize) -> Vec<(BlockKey, bool)> {
        let mut keys = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            keys.push((
                BlockKey {
                    segment,
                    layer: offset + l,
                    kind: BlockKind::Weight,
                },
                layer.weight_trainable(),
            ));
            keys.push((
                BlockKey {
                    segment,
                    layer: offset + l,
                    kind: BlockKind::Bias,
                },
                layer.bias_trainable(),
            ));
        }
        keys
    }

    pub(crate) fn local_block(&self, layer: usize, kind: BlockKind) -> Option<&[f64]> {
        let l = self.layers.get(layer)?;
        Some(match kind {
            BlockKind::Weight => l.weight(),
            BlockKind::Bias => l.bias(),
        })
    }

    pub(crate) fn local_block_mut(&mut self, layer: usize, kind: BlockKind) -> Option<&mut [f64]> {
        if layer >= self.layers.len() {
            return None;
        }
        let l = self.layer_mut(layer);
        Some(match kind {
            BlockKind::Weight => l.weight_mut(),
            BlockKind::Bias => l.bias_mut(),
        })
    }
}

impl Parameterized for Network {
    fn block_keys(&self) -> Vec<(BlockKey, bool)> {
        self.keys_with(Segment::Body, 0)
    }

    fn block(&self, key: BlockKey) -> Option<&[f64]> {
        match key.segment {
            Segment::Body => self.local_block(key.layer, key.kind),
            _ => None,
        }
    }

    fn block_mut(&mut self, key: BlockKey) -> Option<&mut [f64]> {
        match key.segment {
            Segment::Body => self.local_block_mut(key.layer, key.kind),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init() -> InitSpec {
        InitSpec::he_uniform(11)
    }

    #[test]
    fn parameter_count_of_small_net() {
        let net = Network::mlp(&[2, 3, 1], &init()).unwrap();
        assert_eq!(net.total_param_count(), 13);
        assert_eq!(net.trainable_param_count(), 13);
    }

    #[test]
    fn bad_widths_rejected() {
        assert!(matches!(Network::mlp(&[3], &init()), Err(Error::Config(_))));
        assert!(matches!(Network::mlp(&[3, 0, 1], &init()), Err(Error::Config(_))));
        assert!(matches!(Network::mlp(&[], &init()), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::mlp(&[4, 8, 2], &init()).unwrap();
        let b = Network::mlp(&[4, 8, 2], &init()).unwrap();
        let (pa, pb) = (a.flat_params(), b.flat_params());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let layer = DenseLayer::from_parts(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(2, vec![layer]).unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]);
        assert!(net.predict(&x).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn hand_evaluated_relu() {
        let layer = DenseLayer::from_parts(2, 1, vec![1.0, -1.0], vec![0.0], Activation::Relu).unwrap();
        let net = Network::new(2, vec![layer]).unwrap();
        let y = net.predict(&Tensor::row_vector(vec![2.0, 3.0])).unwrap();
        assert_eq!(y.values(), &[0.0]);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let net = Network::mlp(&[3, 4, 1], &init()).unwrap();
        let err = net.forward(&Tensor::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn non_finite_output_is_divergence() {
        let layer = DenseLayer::from_parts(2, 1, vec![1e300, 1e300], vec![0.0], Activation::Identity).unwrap();
        let net = Network::new(2, vec![layer]).unwrap();
        let x = Tensor::row_vector(vec![1e300, 1.0]);
        assert!(matches!(net.forward(&x), Err(Error::Divergence(_))));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Network::mlp(&[2, 4, 1], &init()).unwrap();
        let x = Tensor::row_vector(vec![0.3, -0.2]);
        let (_, cache) = net.forward(&x).unwrap();
        net.layer_mut(0).bias_mut()[0] += 1.0;
        let err = net.backward(&cache, &Tensor::row_vector(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn frozen_blocks_emit_no_gradient() {
        let mut net = Network::mlp(&[3, 5, 2], &init()).unwrap();
        net.layer_mut(0).set_block_trainable(false, true);
        net.layer_mut(1).set_trainable(false);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let (y, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &y).unwrap();
        let keys: Vec<_> = g.params.keys().copied().collect();
        assert_eq!(keys, vec![BlockKey::body(0, BlockKind::Bias)]);
        assert_eq!(net.trainable_param_count(), 5);
    }

    #[test]
    fn split_then_concat_roundtrips() {
        let net = Network::mlp(&[3, 6, 5, 2], &init()).unwrap();
        for k in 0..=3 {
            let (a, b) = net.split_at(k).unwrap();
            assert_eq!(a.concat(&b).unwrap(), net);
        }
        assert!(net.split_at(4).is_err());
    }
}

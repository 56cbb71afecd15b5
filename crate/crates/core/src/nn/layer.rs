use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::init::InitSpec;
use super::spectral::spectral_estimate;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU derivative at exactly 0 is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Persisted power-iteration vectors of a spectrally normalized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Below this `uᵀWv` the layer falls back to the raw weight.
pub(crate) const SIGMA_FLOOR: f64 = 1e-12;

/// Fully connected layer `y = act(W_eff x + b)` with `W` stored `[out × in]`.
///
/// With spectral normalization `W_eff = W / σ` where `σ = uᵀWv` uses the
/// persisted vectors; the vectors only move in [`DenseLayer::refresh_spectral`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    in_width: usize,
    out_width: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
    weight_trainable: bool,
    bias_trainable: bool,
    spectral: Option<SpectralState>,
}

impl DenseLayer {
    pub fn from_parts(
        in_width: usize,
        out_width: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if weight.len() != in_width * out_width || bias.len() != out_width {
            return Err(Error::Dimension(format!(
                "layer {in_width}->{out_width} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_width,
            out_width,
            weight,
            bias,
            activation,
            weight_trainable: true,
            bias_trainable: true,
            spectral: None,
        })
    }

    /// Freshly initialized layer drawn from stream `position` of `init`.
    pub fn initialized(
        position: usize,
        in_width: usize,
        out_width: usize,
        activation: Activation,
        init: &InitSpec,
    ) -> Self {
        Self {
            in_width,
            out_width,
            weight: init.draw_weights(position, out_width, in_width),
            bias: vec![0.0; out_width],
            activation,
            weight_trainable: true,
            bias_trainable: true,
            spectral: None,
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight_trainable(&self) -> bool {
        self.weight_trainable
    }

    pub fn bias_trainable(&self) -> bool {
        self.bias_trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight_trainable = trainable;
        self.bias_trainable = trainable;
    }

    pub fn set_block_trainable(&mut self, weight: bool, bias: bool) {
        self.weight_trainable = weight;
        self.bias_trainable = bias;
    }

    pub fn spectral(&self) -> Option<&SpectralState> {
        self.spectral.as_ref()
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    /// Turns spectral normalization on with a single power iteration from
    /// the all-ones start vector.
    pub fn enable_spectral(&mut self) {
        self.spectral = Some(SpectralState {
            u: vec![0.0; self.out_width],
            v: vec![0.0; self.in_width],
        });
        self.refresh_spectral(1);
    }

    pub fn disable_spectral(&mut self) {
        self.spectral = None;
    }

    /// Advances the persisted power-iteration vectors by `iters` steps.
    pub fn refresh_spectral(&mut self, iters: usize) {
        if let Some(state) = &self.spectral {
            let warm = if state.u.iter().any(|x| *x != 0.0) {
                Some(state.u.as_slice())
            } else {
                None
            };
            let est = spectral_estimate(&self.weight, self.out_width, self.in_width, iters.max(1), warm)
                .expect("layer shapes are consistent");
            self.spectral = Some(SpectralState { u: est.u, v: est.v });
        }
    }

    /// `uᵀWv` with the persisted vectors, or `None` without normalization or
    /// when it falls below the floor.
    pub fn sigma(&self) -> Option<f64> {
        let s = self.spectral.as_ref()?;
        let cols = self.in_width;
        let mut sigma = 0.0;
        for (r, ur) in s.u.iter().enumerate() {
            let row = &self.weight[r * cols..(r + 1) * cols];
            let wv: f64 = row.iter().zip(&s.v).map(|(a, b)| a * b).sum();
            sigma += ur * wv;
        }
        (sigma > SIGMA_FLOOR).then_some(sigma)
    }

    /// The weight actually used by the forward pass.
    pub fn effective_weight(&self) -> Cow<'_, [f64]> {
        match self.sigma() {
            Some(sigma) => Cow::Owned(self.weight.iter().map(|w| w / sigma).collect()),
            None => Cow::Borrowed(&self.weight),
        }
    }

    /// Re-draws weights from `init` stream `position`, zeroes biases and
    /// restarts the spectral state if present. Trainability is kept.
    pub fn reinitialize(&mut self, position: usize, init: &InitSpec) {
        self.weight = init.draw_weights(position, self.out_width, self.in_width);
        self.bias = vec![0.0; self.out_width];
        if self.spectral.is_some() {
            self.enable_spectral();
        }
    }

    pub(crate) fn replace_parameters(
        &mut self,
        in_width: usize,
        out_width: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) {
        debug_assert_eq!(weight.len(), in_width * out_width);
        debug_assert_eq!(bias.len(), out_width);
        self.in_width = in_width;
        self.out_width = out_width;
        self.weight = weight;
        self.bias = bias;
        if self.spectral.is_some() {
            self.enable_spectral();
        }
    }
}

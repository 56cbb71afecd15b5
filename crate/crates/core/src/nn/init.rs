use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-√(6/fan_in), √(6/fan_in))` weights, zero biases.
    #[default]
    HeUniform,
}

/// Initializer plus seed. Layer `l` always draws from its own ChaCha stream
/// `l`, so a layer's initial values depend only on `(seed, l, shape)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn he_uniform(seed: u64) -> Self {
        Self {
            scheme: InitScheme::HeUniform,
            seed,
        }
    }

    pub fn layer_rng(&self, layer: usize) -> ChaCha8Rng {
        seed::rng_stream(self.seed, layer as u64)
    }

    /// Weights for a `[out × in]` layer at position `layer`.
    pub fn draw_weights(&self, layer: usize, out_width: usize, in_width: usize) -> Vec<f64> {
        let mut rng = self.layer_rng(layer);
        match self.scheme {
            InitScheme::HeUniform => he_uniform_fill(&mut rng, in_width, out_width * in_width),
        }
    }

    pub fn derive(&self, salt: u64) -> Self {
        Self {
            scheme: self.scheme,
            seed: seed::mix(self.seed, salt),
        }
    }
}

pub fn he_uniform_fill<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

//! Dense-network substrate: layers, forward/backward passes, He-uniform
//! initialization, RMSProp, weight norms, spectral normalization and the L2
//! penalty.

mod init;
mod layer;
mod network;
mod norms;
mod optim;
mod params;
mod spectral;

pub use init::{he_uniform_fill, InitScheme, InitSpec};
pub use layer::{Activation, DenseLayer, SpectralState};
pub use network::{build_network, ForwardCache, LayerCache, Network};
pub use norms::{l2_penalty_grads, weight_norm, NormScope};
pub use optim::RmsPropState;
pub use params::{BlockKey, BlockKind, Gradients, Parameterized, Segment};
pub use spectral::{spectral_estimate, SpectralEstimate};

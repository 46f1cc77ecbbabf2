//! Invertible feature-to-latent mapping: stacked affine coupling blocks with
//! fixed channel mixing and scaling, plus positional conditioning.

mod coupling;
mod model;
mod permutation;
mod positional;

pub use coupling::{BoundBlock, CouplingBlock};
pub use model::{BoundFlow, FlowConfig, FlowModel};
pub use permutation::{as_permutation, mixing_matrix, PermMode};
pub use positional::{PosMode, PositionalEmbedding};

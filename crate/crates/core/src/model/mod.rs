//! Deterministic toy video diffusion transformer.
//!
//! Blocks run AdaLN-modulated self-attention, cross-attention over a
//! condition embedding, and an AdaLN-modulated MLP. Block 0 can record eight
//! intermediate tensors ([`TapId`]) that serve as cheap proxies for how much
//! the whole network's residual changes between denoising steps.

mod block;
mod config;
mod dit;
mod taps;
mod types;
mod weights;

pub use block::block_forward;
pub use config::ModelConfig;
pub use dit::{
    block0_proxy, dit_forward, forward_block0, forward_rest, patchify, patchify_raw,
    timestep_embedding, unpatchify, unpatchify_raw, BlockZero, DitOutput, Model, TapRecorder,
};
pub use taps::{ProxyTapSet, TapId, TapMap};
pub use types::{ConditionEmbedding, LatentVideo, TokenRole, TokenSequence};
pub use weights::{init_weights, BlockWeights, DiTWeights, MODULATION_CHUNKS};

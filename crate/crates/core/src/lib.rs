//! Training-free step reuse for diffusion transformers.
//!
//! A cheap proxy taken from the first transformer block decides, step by
//! step, whether the full network must run or whether the residual cached
//! at the last computed step can be added to the current input instead. The
//! conditional and unconditional guidance passes share that decision.
//!
//! The crate contains a deterministic toy video DiT ([`model`]), the
//! sampling loop ([`sampling`]), the reuse controller ([`reuse`]), oracle
//! and FLOP instrumentation ([`instrument`]), rank-correlation proxy
//! selection ([`selection`]), full-reference quality metrics ([`quality`])
//! and the file formats and experiment drivers behind the CLI ([`harness`]).

pub mod error;
pub mod harness;
pub mod instrument;
pub mod model;
pub mod quality;
pub mod reuse;
pub mod sampling;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};

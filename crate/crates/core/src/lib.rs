//! Cross-modal mutual-learning transformer for cued-speech recognition.
//!
//! Lip and hand feature streams pass through a shared linguistic codebook,
//! a multimodal encoder whose streams exchange information only through
//! fused linguistic bottleneck tokens, and a cross-attention alignment
//! stage, and are trained with a two-branch CTC objective.

pub mod codebook;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod vla;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Tensor, Trace, Var};

//! Chirality-equivariant neural network layers.
//!
//! A [`JointLayout`] partitions a pose vector into left, right and center
//! joints with some coordinates negated under reflection. The chirality
//! transform swaps mirrored joints and flips those coordinates. Every layer
//! here is built so that transforming its input transforms its output in the
//! same way, which shrinks the parameter count and lets inference fold
//! mirrored inputs before multiplying.

pub mod accounting;
pub mod autodiff;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod layout;
pub mod recurrent;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{ChiralityTransform, JointLayout, Part, Side};
pub use tensor::Tensor;

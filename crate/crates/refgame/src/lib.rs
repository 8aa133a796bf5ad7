//! Referential-game laboratory for emergent communication experiments.
//!
//! A speaker observes a target object among distractors, emits a short
//! discrete message, and a listener must pick the target out of a candidate
//! set from the message alone. Both agents are trained from the game reward
//! (REINFORCE for the speaker, cross-entropy for the listener), and the
//! library measures what kind of language emerges, with and without
//! cross-modal attention.
//!
//! Numeric code is generic over the scalar type through [`scalar::Scalar`];
//! the lab itself runs everything in `f64`, aliased as [`Real`].

pub mod agents;
pub(crate) mod binio;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod seeds;
pub mod world;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Scalar type every experiment runs in.
pub type Real = f64;

/// Tensor specialized to the lab's scalar type.
pub type RealTensor = tensor::Tensor<Real>;

//! Multi-scale prototypical transformer for multiple-instance learning over
//! pre-extracted feature bags.
//!
//! The pipeline: per-bag K-means prototypes at every scale ([`clustering`]),
//! cross-attention re-calibration of those prototypes against all instances
//! ([`pt`]), a Mixer layer over the concatenated scale pyramid followed by
//! gated attention pooling and a linear head ([`mffm`]). [`model`] wires
//! these together along with the pooling baselines and fusion variants, and
//! [`train`] holds the training loop, metrics and experiment runners.

pub mod clustering;
pub mod data;
pub mod digest;
pub mod error;
pub mod mffm;
pub mod model;
pub mod pt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Tape, Tensor2, Var};

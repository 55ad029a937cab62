//! Two-level hierarchical image classification: a root model routes an image
//! to one of several leaf models, each classifying a group of synsets.
//!
//! The crate covers taxonomy construction and partitioning ([`taxonomy`]),
//! CNN layers and networks ([`layers`], [`network`]), supervised training
//! ([`training`]), convolutional RBM pretraining ([`crbm`]), routed inference
//! and top-5 evaluation ([`hierarchy`]), and data/model I/O ([`dataio`]).

pub mod crbm;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod hierarchy;
#[cfg(feature = "fault-injection")]
mod fault;
pub mod layers;
pub mod network;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::Mode;
pub use network::{LayerSpec, ModelState, NetworkSpec};
pub use tensor::{Real, Tensor};

//! Attention visualization for convolutional networks by optimizing a
//! unit-L2-norm spatial filter, with Grad-CAM style baselines and a weakly
//! supervised localization harness, all on toy networks and synthetic data.

pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod network;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, NodeId, Tape};
pub use error::{Error, ModelFileError, Result};
pub use network::{HeadKind, LayerSpec, NetworkModel};
pub use tensor::Tensor;

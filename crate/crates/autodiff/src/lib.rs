//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Everything runs in `f64` on the CPU. A [`Graph`] is rebuilt for every
//! training step: forward ops append nodes to a tape, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Parameters live in a [`ParamStore`] and are updated by [`Adam`].

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
pub mod rng;
pub mod suite;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error};
pub use graph::{Conv2dSpec, Graph, Var};
pub use params::{fan_in, ParamStore};
pub use tensor::Tensor;

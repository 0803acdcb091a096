//! Minimal dense-tensor autodiff used by the SelectionGAN crates.
//!
//! Values live on a [`Graph`] tape; [`Graph::backward`] sweeps it in reverse
//! and returns gradients for every trainable leaf. All arithmetic is `f64`
//! and single-threaded, so results are bitwise reproducible.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;

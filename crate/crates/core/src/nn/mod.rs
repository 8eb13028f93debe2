//! Minimal tensor, autograd and layer toolkit used by every network in the
//! crate (autoencoder, denoiser, conditioning encoder, classifier).

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{effective_groups, sinusoidal_embedding, Conv2d, GroupNorm, Init, Linear};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

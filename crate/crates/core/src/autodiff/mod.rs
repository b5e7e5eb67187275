//! Reverse-mode autodiff over f32/f64 with a deliberately small op set:
//! exactly what the codec's transform, context model, and losses need.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod registry;
pub mod scalar;
pub mod tensor;
pub mod weights;

pub use graph::{BufId, Graph, GraphFlags, TrainFilter};
pub use kernels::{Mask, Pad};
pub use registry::{ParamRegistry, ParamSnapshot};
pub use scalar::Real;
pub use tensor::Tensor;

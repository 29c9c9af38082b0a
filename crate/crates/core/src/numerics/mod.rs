//! Numerical foundation: tensors, deterministic RNG, reverse-mode autodiff,
//! and the Adam optimizer.

pub mod adam;
pub mod fdcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use rng::SeededRng;
pub use tape::{GradTape, Gradients};
pub use tensor::NdTensor;

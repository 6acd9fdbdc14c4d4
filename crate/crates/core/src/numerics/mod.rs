//! Tensor, layers with hand-written backward passes, losses, optimizers and
//! finite-difference gradient checking.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, Coordinates, GradCheckReport, LayerProbe, Objective};
pub use layers::{Layer, LayerKind, Mode};
pub use loss::{cross_entropy, softmax, PROB_FLOOR};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::Tensor;

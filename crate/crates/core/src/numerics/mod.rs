//! Dense tensors, complex matrices as real pairs, reverse-mode
//! differentiation, finite-difference checking and optimizers.

pub mod complex;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use complex::{abs_squared, complex_matmul, ComplexMatrix};
pub use graph::{BatchStats, CVar, Graph, Mode, Var};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

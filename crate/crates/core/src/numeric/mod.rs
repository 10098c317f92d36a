//! Dense tensors, reverse-mode gradients, and seeded random streams.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use rng::{hash_bytes, stream_id, RngStream};
pub use tape::{sigmoid, softplus, CustomOp, Gradients, ParamId, ParamStore, Tape, Unary, Var};
pub use tensor::Tensor;

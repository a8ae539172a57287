//! Reverse-mode differentiation over dense matrices, the parameter store and
//! small feed-forward networks.

mod mlp;
mod params;
mod tape;
mod tensor;

pub use mlp::Mlp;
pub use params::{ParamId, ParameterStore};
pub use tape::{logsumexp, Adjoints, Tape, Var};
pub use tensor::Tensor;

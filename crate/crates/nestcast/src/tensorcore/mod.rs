//! Dense arrays and differentiable primitives with analytic backward passes.

pub mod gradcheck;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use params::{load_params, save_params, ParamBinding, ParamId, ParamLeaf, ParamStore};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor2;

/// LayerNorm epsilon used across the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

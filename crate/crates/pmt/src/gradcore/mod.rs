//! Dense tensor arithmetic with reverse-mode automatic differentiation and an
//! SGD-with-momentum optimizer.
//!
//! Tensors are row-major, single precision by default (`Tensor` =
//! `Tensor<f32>`); every op is also available at `f64` so numerical tests can
//! run in double precision. A tensor records the op that produced it and its
//! parents whenever gradients are enabled and at least one input requires
//! them; [`Tensor::backward`] walks that graph in reverse topological order
//! and accumulates gradients on every reachable `requires_grad` tensor.
//!
//! Every op validates shapes and scans its output for NaN/Inf — a non-finite
//! value is an error state, never a silent poison. Broadcasting is restricted
//! to exact-match or scalar by design.
//!
//! Graphs are confined to one thread (`Tensor` is deliberately `!Send`);
//! distinct graphs may run on distinct threads with no shared state.

mod conv;
mod sgd;
mod tensor;

pub use sgd::{sgd_step, ParamSet, SgdState};
pub use tensor::{no_grad, Scalar, Tensor, TensorError};

/// Crate-wide result alias for tensor operations.
pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Casts an `f64` constant into the active scalar type.
///
/// Panics only if the cast is unrepresentable, which cannot happen for the
/// finite constants this crate uses.
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("finite constant representable in scalar type")
}

//! Reverse-mode automatic differentiation over `ndarray`, sized for small
//! convolutional networks trained on CPU.
//!
//! The design is a flat tape: every forward op appends a node holding its
//! value and enough context to compute input gradients. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! requires them. Parameters live outside the tape in a [`ParamStore`] and
//! are copied onto the tape at the start of each step, so a tape is cheap to
//! build and throw away per iteration.
//!
//! Determinism: all kernels are single-threaded with fixed iteration order,
//! so identical inputs and parameters produce bit-identical outputs. The
//! codec relies on this for encoder/decoder reconstruction agreement.

pub mod kernels;
mod optim;
mod store;
mod tape;

pub use optim::Adam;
pub use store::{ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Dynamic-rank f32 tensor, the only value type flowing through the tape.
pub type TensorData = ndarray::ArrayD<f32>;

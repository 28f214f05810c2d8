//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Gradients are produced as new nodes on the same [`Tape`], which makes
//! them differentiable in turn: a loss written in terms of `tape.grad(..)`
//! can be differentiated again with respect to the original parameters.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::scalar(3.0));
//! let y = w * w * w; // w^3
//! let dy = tape.grad(y, &[w])[0]; // 3 w^2
//! let d2y = tape.grad(dy, &[w])[0]; // 6 w
//! assert_eq!(dy.item(), 27.0);
//! assert_eq!(d2y.item(), 18.0);
//! ```

pub mod nn;
mod tape;
mod tensor;

pub use tape::{IndexMap, Tape, Var, SKIP};
pub use tensor::Tensor;

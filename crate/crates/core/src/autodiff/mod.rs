//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Operations are methods on [`Tape`] returning [`Var`] handles. Inputs are
//! registered either as tracked leaves ([`Tape::leaf`]) or constants; a call
//! to [`Tape::backward`] on a scalar fills the gradient of every tracked leaf.
//!
//! ```
//! use gcex::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let loss = tape.sum(tape.mul(w, w).unwrap());
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{logistic, softplus, Tape, Var};
pub use tensor::Tensor;

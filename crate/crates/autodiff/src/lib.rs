//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! sweeps the record in reverse and accumulates gradients into leaves.
//!
//! ```
//! use dnerf_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let y = x.square().unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```
//!
//! Binary elementwise ops accept operands whose shapes differ only by
//! missing leading dimensions; everything else is a shape error.

mod check;
mod error;
mod ops;
mod real;
mod tape;
mod tensor;

pub use check::{finite_difference_check, finite_difference_check_many};
pub use error::{AutodiffError, Result};
pub use real::{Real, GUARD_EPS};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

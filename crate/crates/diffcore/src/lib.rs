//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records eagerly evaluated nodes; [`Tape::grad`] sweeps it in
//! reverse to produce a [`GradientMap`]. The crate also carries the gradient
//! utilities the training code needs: global-norm clipping, Adam, and a
//! central-difference checker.
//!
//! ```
//! use diffcore::{Tape, Array};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Array::from_elem((1, 1), 3.0));
//! let y = tape.square(x).unwrap();
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g.get(x).unwrap()[[0, 0]], 6.0);
//! ```

mod check;
mod error;
mod grad;
mod optim;
mod tape;

pub use check::{finite_difference_check, finite_difference_report, FdReport};
pub use error::{DiffError, Result, Shape};
pub use grad::GradientMap;
pub use optim::{adam_step, adam_step_with, clip_gradient_norm, AdamConfig, OptimizerState};
pub use tape::{Array, Axis, Node, Op, Tape, Var};

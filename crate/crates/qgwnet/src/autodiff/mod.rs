//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is define-by-run: a [`Tape`] records every primitive op during
//! the forward pass, and [`Tape::backward`] replays the record once in
//! reverse, accumulating gradients for every leaf created with
//! `requires_grad`. Tapes are rebuilt per forward pass, which is what lets
//! the model condition each pass on a different quantile level.
//!
//! Tensors that participate in a tape are never mutated in place; every op
//! allocates its output. That keeps the reverse pass correct by construction.
//!
//! ```
//! use qgwnet::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
//! let loss = x.mul(x).unwrap().sum().unwrap(); // sum(x^2)
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
pub(crate) mod ops;
pub(crate) mod tape;
pub(crate) mod tensor;

pub use check::{grad_check, grad_check_multi};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Every value is a row-major `f64` matrix. Operations are recorded on a
//! [`Tape`] and [`Tape::backward`] replays them in reverse to produce
//! [`Gradients`]. Parameters can be borrowed onto a tape without copying,
//! which keeps the borrow checker in charge of "no update while a pass is
//! in flight".
//!
//! ```
//! use msved_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.0), true);
//! let y = tape.sigmoid(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.scalar(y), 0.5);
//! assert_eq!(grads.get(x).unwrap()[0], 0.25);
//! ```

mod error;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{central_difference_error, finite_difference_check, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

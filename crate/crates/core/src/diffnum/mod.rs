//! Reverse-mode automatic differentiation on small dense 2-D tensors.
//!
//! The training stack is built on an eager tape: every operation runs
//! immediately on concrete values and records enough information to replay
//! the chain rule backwards. Tensors are plain row-major `Vec`s — at the
//! scale this crate operates (hidden widths in the tens to hundreds) that
//! beats any clever layout, and it keeps gradient formulas auditable.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod tape;
pub mod tensor;

pub use adam::{lr_schedule, AdamState};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

//! Minimal dense tensor with reverse-mode autodiff, the neural primitives
//! the model modules compose, and optimizer/gradient-check utilities.

pub mod attention;
pub mod fdcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use attention::MultiHeadAttention;
pub use fdcheck::{finite_diff_check, EvalResult, FdReport, FD_EPS, FD_RTOL};
pub use optim::{cosine_anneal_lr, SgdMomentum};
pub use tape::{Mode, Tape, ValueId};
pub use tensor::{assert_finite, standard_normal, Parameter, Tensor};

//! Dense matrices and the reverse-mode tape the decoder is built on.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{softmax_rows, FlopTag, MacCounter, Tape, Var};

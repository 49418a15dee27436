//! Dense primal-dual interior-point solver for linear matrix inequality programs.
//!
//! Problems have the form
//!
//! ```text
//! minimize  c'y
//! s.t.      F_b0 + sum_k y_k F_bk ⪰ 0   for each block b
//!           A y = b
//! ```
//!
//! Programs can be written to and read from a line-based sparse-triplet text
//! format (see [`triplet`]) so they can be handed to an external solver.

mod exec;
mod ipm;
mod program;
pub mod reference;
pub mod triplet;

pub use exec::Exec;
pub use ipm::{solve, SolveOptions, SolveResult, SolveStatus};
pub use program::{ConicProgram, LmiBlock, SparseSym};

#[derive(Debug, thiserror::Error)]
pub enum SdpError {
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

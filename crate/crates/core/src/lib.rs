//! Maximum-likelihood identification of linear Gaussian state-space models.
//!
//! Two EM variants are provided:
//!
//! * [`em_states`] — the classical algorithm that treats the state sequence as
//!   missing data (requires a full-rank disturbance, `G = I`);
//! * [`em_dist`] — EM with the initial state and disturbance sequence as the
//!   missing data. Its M-step for the system matrices minimises a convex
//!   Lagrangian upper bound over a set of models certified stable by an LMI,
//!   so every iterate is stable and singular disturbance structures are fine.

pub mod em_dist;
pub mod em_states;
mod error;
pub mod history;
pub mod inference;
pub mod lagrangian;
pub mod lifted;
pub mod linalg;
pub mod model;

pub use error::{LgssError, Result};
pub use lgss_sdp::Exec;

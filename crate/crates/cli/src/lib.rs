//! Command-line front end for `lgss-core`: simulation, identification and the
//! four experiment drivers that emit CSV.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod io;
pub mod output;

use lgss_core::LgssError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Solver(#[from] LgssError),
}

impl CliError {
    /// 1 for anything the user can fix by changing inputs, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(LgssError::DimensionMismatch(_) | LgssError::InvalidModel(_)) => 1,
            CliError::Solver(_) => 2,
            _ => 1,
        }
    }
}

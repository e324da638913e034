//! Experiment orchestration for the voltage-regulation toolkit: TOML
//! configuration, scenario assembly and the `simulate`, `fit-correction`,
//! `train`, `coordinate` and `report` pipelines.

pub mod commands;
pub mod config;
pub mod scenario;

use thiserror::Error;
use voltreg_core::coordination::CoordinationError;
use voltreg_core::grid::GridError;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Io(_) => 1,
        }
    }
}

impl From<GridError> for AppError {
    fn from(e: GridError) -> Self {
        AppError::Numerical(e.to_string())
    }
}

impl From<CoordinationError> for AppError {
    fn from(e: CoordinationError) -> Self {
        match e {
            CoordinationError::InvalidBeta(_) | CoordinationError::Config(_) => AppError::Config(e.to_string()),
            _ => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

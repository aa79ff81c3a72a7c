use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric overflow: linear predictor reached {eta} (row {row})")]
    NumericOverflow { eta: f64, row: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown categorical level {0}")]
    UnknownLevel(f64),

    #[error("singular design: columns {columns:?} are linearly dependent on the sample")]
    SingularDesign { columns: Vec<usize> },

    #[error("undefined diagnostic: {0}")]
    UndefinedDiagnostic(String),

    #[error("empty kernel neighborhood at z0 = {z0}")]
    EmptyNeighborhood { z0: f64 },

    #[error("solver did not converge after {iterations} iterations (KKT violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },
}

/// Broad class of an error, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    /// Stable, module-qualified identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Argument(_) => "core.argument",
            Error::NumericOverflow { .. } => "optim.numeric_overflow",
            Error::NotConverged { .. } => "optim.not_converged",
            Error::DegenerateData(_) => "nuisance.degenerate_data",
            Error::Data(_) => "design.data",
            Error::UnknownLevel(_) => "design.unknown_level",
            Error::SingularDesign { .. } => "cste.singular_design",
            Error::UndefinedDiagnostic(_) => "nuisance.undefined_diagnostic",
            Error::EmptyNeighborhood { .. } => "kernels.empty_neighborhood",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) => ErrorClass::Config,
            Error::DegenerateData(_) | Error::Data(_) | Error::UnknownLevel(_) => ErrorClass::Data,
            Error::NumericOverflow { .. }
            | Error::NotConverged { .. }
            | Error::SingularDesign { .. }
            | Error::UndefinedDiagnostic(_)
            | Error::EmptyNeighborhood { .. } => ErrorClass::Numeric,
        }
    }
}

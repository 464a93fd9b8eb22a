use std::fmt;

use manifold_potential::Error as CoreError;

/// Failure classes, each with its process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Malformed input file, flag or config value.
    Parse,
    /// The solver or a downstream transform failed.
    Solver,
    /// Filesystem trouble.
    Io,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn parse(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Parse,
            message: message.into(),
        }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Solver,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Parse => 2,
            Kind::Solver => 3,
            Kind::Io => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Core errors that stem from bad inputs map to parse failures, the rest to
/// solver failures.
impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidWindow { .. }
            | CoreError::DegenerateShape { .. }
            | CoreError::DataLength { .. }
            | CoreError::NonFinite { .. }
            | CoreError::ShapeMismatch { .. }
            | CoreError::GridTooSmall { .. }
            | CoreError::EmptyDensity
            | CoreError::InvalidDensity { .. }
            | CoreError::NegativeInput { .. }
            | CoreError::MassEscape { .. } => CliError::parse(e.to_string()),
            CoreError::NonInvertible { failed, total, ref mask } => {
                let first: Vec<String> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .take(5)
                    .map(|(i, _)| i.to_string())
                    .collect();
                CliError::solver(format!(
                    "non-invertible field: {failed} of {total} nodes did not converge (first flat indices: {})",
                    first.join(", ")
                ))
            }
            other => CliError::solver(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

//! Machine-readable CLI errors.

use mvi_core::Error;
use serde::Serialize;

/// Exit status for input and validation failures.
pub const EXIT_INPUT: i32 = 1;
/// Exit status for internal invariant violations.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
    pub exit: i32,
}

impl CliError {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        CliError {
            code,
            detail: detail.into(),
            exit: EXIT_INPUT,
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new("invalid_config", detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        CliError {
            code: "internal_error",
            detail: detail.into(),
            exit: EXIT_INTERNAL,
        }
    }

    /// `{"error": code, "detail": text}` on one line.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            detail: &'a str,
        }
        serde_json::to_string(&Line {
            error: self.code,
            detail: &self.detail,
        })
        .expect("serializes")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidTransform(_) => "invalid_transform",
            Error::IllConditionedStainMatrix { .. } => "ill_conditioned_stain_matrix",
            Error::UnknownStain(_) => "unknown_stain",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::UndefinedIndex => "undefined_index",
            Error::InconsistentField { .. } => "inconsistent_field",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::ManifestNotFound(_) => "manifest_not_found",
            Error::ResolutionMismatch(_) => "resolution_mismatch",
            Error::Io { .. } => "io_error",
            Error::Image { .. } => "image_error",
            Error::Json { .. } => "invalid_json",
        };
        CliError::new(code, e.to_string())
    }
}

/// Prints a one-line warning object on stderr.
pub fn warn(code: &str, detail: impl Into<String>) {
    #[derive(Serialize)]
    struct Line<'a> {
        warning: &'a str,
        detail: String,
    }
    let line = Line {
        warning: code,
        detail: detail.into(),
    };
    eprintln!("{}", serde_json::to_string(&line).expect("serializes"));
}

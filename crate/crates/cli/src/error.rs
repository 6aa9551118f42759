//! Error kinds with stable exit codes and their JSON rendering.

use serde::Serialize;

use qsm_core::Error as CoreError;
use qsm_nn::NnError;

/// Exit code table, printed under `--help`.
pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, bad flag value)
  3  file error (missing, unreadable or unwritable path)
  4  format error (malformed volume, checkpoint or JSON)
  5  invalid input (dimension or unit mismatch, empty mask, bad parameter)
  6  numerical failure (non-convergence, divergence, non-finite values)
  7  model error (network configuration or attention size)
Errors are printed to stderr as one JSON object: {\"error\":{\"kind\",\"code\",\"message\"}}.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Internal,
    Usage,
    File,
    Format,
    InvalidInput,
    Numerical,
    Model,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::File => 3,
            ErrorKind::Format => 4,
            ErrorKind::InvalidInput => 5,
            ErrorKind::Numerical => 6,
            ErrorKind::Model => 7,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidInput, message)
    }

    pub fn file(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::File, format!("{}: {err}", path.display()))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: ErrorKind,
            code: u8,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body { kind: self.kind, code: self.kind.exit_code(), message: &self.message },
        })
        .expect("error JSON")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn core_kind(e: &CoreError) -> ErrorKind {
    match e {
        CoreError::Io(_) => ErrorKind::File,
        CoreError::BadMagic { .. }
        | CoreError::Header(_)
        | CoreError::UnknownUnit(_)
        | CoreError::TruncatedPayload { .. }
        | CoreError::PayloadMismatch { .. } => ErrorKind::Format,
        CoreError::CgNotConverged { .. } | CoreError::Diverged { .. } | CoreError::NonFinite(_) => ErrorKind::Numerical,
        _ => ErrorKind::InvalidInput,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self::new(core_kind(&e), e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        let kind = match &e {
            NnError::Core(c) => core_kind(c),
            NnError::Io(_) => ErrorKind::File,
            NnError::Json(_) | NnError::Checkpoint(_) => ErrorKind::Format,
            NnError::NonFiniteGradient(_) | NnError::NonFiniteLoss(_) => ErrorKind::Numerical,
            NnError::EmptyMask => ErrorKind::InvalidInput,
            NnError::Shape(_) | NnError::Config(_) | NnError::AttentionTooLarge { .. } => ErrorKind::Model,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorKind::Format, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

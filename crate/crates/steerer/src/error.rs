//! Crate-wide error type and result alias.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad invocation or bad argument values.
    Usage,
    /// Missing, malformed or corrupted data on disk.
    Data,
    /// A numeric contract was violated (NaN loss, failed gradient check, ...).
    Numeric,
}

/// Errors emitted by tensors, the model, the data pipeline and the harness.
#[derive(Debug)]
pub enum Error {
    /// Two tensors disagree on shape where they must match.
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    /// Channel counts disagree (convolution kernels, norm affine, head input).
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// An argument is outside the supported range.
    InvalidArgument { op: &'static str, msg: String },
    /// backward() was called on a non-scalar value.
    NonScalarLoss { shape: [usize; 4] },
    /// A spatial shape is not divisible by the required stride product.
    IndivisibleShape {
        what: &'static str,
        h: usize,
        w: usize,
        divisor: usize,
    },
    /// A selection label exceeds the number of resolution levels.
    OutOfRangeLabel { label: usize, max_level: usize },
    /// One-hot masks do not partition the patch grid.
    PartitionViolated { row: usize, col: usize, sum: f64 },
    /// Duplicate parameter name registered in a store.
    DuplicateParameter { name: String },
    /// A named tensor expected by the model is absent from a checkpoint.
    MissingTensor { name: String },
    /// I/O failure, tagged with the offending path.
    Io { path: PathBuf, source: io::Error },
    /// Malformed text data, tagged with file and line.
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// A referenced file does not exist.
    MissingFile { path: PathBuf },
    /// Stored checksum does not match file contents.
    HashMismatch {
        path: PathBuf,
        line: usize,
        expected: String,
        got: String,
    },
    /// Checkpoint header is not the expected magic.
    BadCheckpointMagic { path: PathBuf },
    /// Checkpoint version is not supported by this build.
    CheckpointVersion { found: u32, supported: u32 },
    /// Unrecognized fusion mode string.
    UnknownMode { mode: String },
    /// Blob placement could not satisfy the separation constraint.
    SeparationUnsatisfiable {
        class: usize,
        placed: usize,
        attempts: usize,
    },
    /// An operation that needs at least one element got none.
    EmptyInput(&'static str),
    /// NaN/Inf encountered where finite values are guaranteed.
    NumericFailure { context: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument { .. } | Error::UnknownMode { .. } => ErrorKind::Usage,
            Error::NumericFailure { .. } | Error::NonScalarLoss { .. } => ErrorKind::Numeric,
            Error::ShapeMismatch { .. }
            | Error::ChannelMismatch { .. }
            | Error::IndivisibleShape { .. }
            | Error::OutOfRangeLabel { .. }
            | Error::PartitionViolated { .. }
            | Error::DuplicateParameter { .. }
            | Error::MissingTensor { .. }
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::MissingFile { .. }
            | Error::HashMismatch { .. }
            | Error::BadCheckpointMagic { .. }
            | Error::CheckpointVersion { .. }
            | Error::SeparationUnsatisfiable { .. }
            | Error::EmptyInput(_) => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{}x{}x{} vs {}x{}x{}x{}",
                left[0], left[1], left[2], left[3], right[0], right[1], right[2], right[3]
            ),
            Error::ChannelMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected} channels, got {got}")
            }
            Error::InvalidArgument { op, msg } => write!(f, "{op}: {msg}"),
            Error::NonScalarLoss { shape } => write!(
                f,
                "backward requires a scalar loss, got {}x{}x{}x{}",
                shape[0], shape[1], shape[2], shape[3]
            ),
            Error::IndivisibleShape { what, h, w, divisor } => {
                write!(f, "{what}: {h}x{w} is not divisible by {divisor}")
            }
            Error::OutOfRangeLabel { label, max_level } => {
                write!(f, "selection label {label} exceeds max level {max_level}")
            }
            Error::PartitionViolated { row, col, sum } => write!(
                f,
                "one-hot masks sum to {sum} instead of 1 at patch ({row}, {col})"
            ),
            Error::DuplicateParameter { name } => {
                write!(f, "parameter `{name}` registered twice")
            }
            Error::MissingTensor { name } => {
                write!(f, "checkpoint is missing tensor `{name}`")
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Parse { path, line, msg } => {
                write!(f, "{}:{line}: {msg}", path.display())
            }
            Error::MissingFile { path } => write!(f, "missing file {}", path.display()),
            Error::HashMismatch {
                path,
                line,
                expected,
                got,
            } => write!(
                f,
                "checksum mismatch for {} (checksums line {line}): expected {expected}, got {got}",
                path.display()
            ),
            Error::BadCheckpointMagic { path } => {
                write!(f, "{} is not a checkpoint (bad magic)", path.display())
            }
            Error::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint version {found} not supported (this build reads version {supported})"
            ),
            Error::UnknownMode { mode } => write!(
                f,
                "unknown fusion mode `{mode}` (expected steerer, bl1_concat or bl2_fpn)"
            ),
            Error::SeparationUnsatisfiable {
                class,
                placed,
                attempts,
            } => write!(
                f,
                "could not place blob of class {class} after {attempts} attempts ({placed} already placed)"
            ),
            Error::EmptyInput(what) => write!(f, "{what}: empty input"),
            Error::NumericFailure { context } => write!(f, "numeric failure: {context}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

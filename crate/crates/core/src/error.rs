use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },

    /// A loaded value violates a documented invariant.
    #[error("invalid {field} = {value}: {reason}")]
    Invalid {
        field: String,
        value: String,
        reason: String,
    },

    #[error("schedule does not match sketch: {0}")]
    SketchMismatch(String),

    #[error("space size {size} exceeds cap {cap}")]
    SpaceTooLarge { size: u128, cap: u128 },

    #[error("elementwise ops take the trivial sketch")]
    ElementwiseSketch,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad input: {0}")]
    Input(String),

    #[error("budget exhausted: {0}")]
    Budget(String),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::Invalid { .. } => "E_INVALID",
            Error::SketchMismatch(_) => "E_SKETCH",
            Error::SpaceTooLarge { .. } => "E_SPACE",
            Error::ElementwiseSketch => "E_SKETCH",
            Error::Shape(_) => "E_SHAPE",
            Error::Input(_) => "E_INPUT",
            Error::Budget(_) => "E_BUDGET",
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, value: impl ToString, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

//! Crate-wide error type with CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller-supplied value (rate out of range, zero order, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input file; carries the 1-based line number.
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Count tables built under different inventories or settings.
    #[error("incompatible tables: {0}")]
    TableMismatch(String),

    /// Binary count table failed structural validation.
    #[error("corrupt count table: {0}")]
    CorruptTable(String),

    /// Input data violates a documented contract (unknown id, unknown label, ...).
    #[error("{0}")]
    Data(String),

    #[error("no n-grams observed at order {0}")]
    EmptyDistribution(u8),

    #[error("no usable sentences on the {side} side (skip rate {skip_rate:.4})")]
    NoUsableSentences { side: &'static str, skip_rate: f64 },

    #[error("duplicate scatter key: pair {pair:?} order {order}")]
    DuplicateScatterKey { pair: String, order: u8 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 usage error, 2 data/parse error, 3 computation error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::TableMismatch(_)
            | Error::CorruptTable(_)
            | Error::DuplicateScatterKey { .. }
            | Error::Data(_) => 2,
            Error::EmptyDistribution(_) | Error::NoUsableSentences { .. } => 3,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("pulse width {width_s:e} s is below the 5 ns minimum")]
    PulseWidth { width_s: f64 },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("set conflict: sub-array {sub_array} set {set} addressed more than once")]
    SetConflict { sub_array: usize, set: usize },

    #[error("register access error at 0x{addr:02x}: {reason}")]
    Access { addr: u8, reason: &'static str },

    #[error("sub-array {0} is busy")]
    Busy(usize),

    #[error("field `{field}` value {value} does not fit in {bits} bits")]
    Encoding { field: &'static str, value: u32, bits: u32 },

    #[error("packet index {0} out of range 0..=33")]
    PacketIndex(usize),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Parse { .. } | Error::Config(_) => 1,
            Error::PulseWidth { .. }
            | Error::Selection(_)
            | Error::SetConflict { .. }
            | Error::Access { .. }
            | Error::Busy(_)
            | Error::Encoding { .. }
            | Error::PacketIndex(_)
            | Error::Range(_) => 2,
            Error::Io { .. } | Error::Csv(_) => 3,
            Error::Framing(_) | Error::Integrity(_) => 4,
        }
    }
}

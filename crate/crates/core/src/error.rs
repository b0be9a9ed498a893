use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown preset `{0}` (expected `desk` or `paper`)")]
    UnknownPreset(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("ZC root {root} is not coprime with sequence length {len}")]
    NonCoprimeRoot { root: usize, len: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("frame {frame} has zero variance and cannot be standardized")]
    ZeroVariance { frame: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("format version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("backward called without a training-mode forward trace")]
    MissingTrace,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

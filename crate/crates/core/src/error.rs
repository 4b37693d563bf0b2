use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed an argument outside its documented range.
    #[error("input error: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Depth or disparity content violates a data invariant.
    #[error("data error: {0}")]
    Data(String),

    #[error("no fixation surface at pixel ({u}, {v})")]
    NoFixationSurface { u: usize, v: usize },

    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite activation at layer {layer}")]
    Numerical { layer: usize },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("insufficient signal: {usable} usable pixels, need {required}")]
    InsufficientSignal { usable: usize, required: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::NoFixationSurface { .. } => "no_fixation_surface",
            Error::Generation { .. } => "generation",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Numerical { .. } => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::InsufficientSignal { .. } => "insufficient_signal",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { field: field.into(), reason: reason.into() }
    }
}

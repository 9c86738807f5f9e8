//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration problems
//! (exit 2), data problems (exit 3), and numeric/degeneracy problems (exit 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad parameter ranges, impossible
    /// requests such as more vertebrae than label categories).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (bad headers, payload size
    /// mismatches, non-finite voxels, unknown label names).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure while reading or writing artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A point projects from behind (or onto) the source plane, so the
    /// perspective divide is undefined.
    #[error("projection singular for view {view}: point at source-plane distance {denom_mm} mm")]
    ProjectionSingular { view: usize, denom_mm: f64 },

    /// The normal system of a ray bundle is too ill-conditioned to invert;
    /// `lines` are the indices of the offending rays within the bundle.
    #[error("degenerate ray geometry (condition {cond:.3e}) involving lines {lines:?}")]
    DegenerateGeometry { cond: f64, lines: Vec<usize> },

    /// A numeric guard tripped (non-positive weight mass, empty reductions).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Build an [`Error::Io`] tagged with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::ProjectionSingular { .. }
            | Error::DegenerateGeometry { .. }
            | Error::Numeric(_) => 4,
        }
    }
}

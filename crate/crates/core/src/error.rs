//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Blob analysis found no foreground pixels (body off frame or unlit).
    #[error("empty blob: no pixels above threshold {threshold}")]
    EmptyBlob { threshold: f64 },

    /// Bounding box larger than the largest supported padded size.
    #[error("body exceeds sensor: bounding box {size} px > 1024 px")]
    BodyExceedsSensor { size: usize },

    /// The rendered body does not intersect the field of view at all.
    #[error("body outside field of view (apparent radius {apparent_deg:.3} deg, half-fov {half_fov_deg:.3} deg)")]
    BodyOutsideFov {
        apparent_deg: f64,
        half_fov_deg: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("factorization failed at pivot {pivot} (value {value:.3e}); try a larger 1/C")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A label component has max == min over the training set.
    #[error("degenerate normalizer: component {component} has max == min ({value})")]
    DegenerateNormalizer { component: usize, value: f64 },

    #[error("non-finite value in {context} (sample {sample})")]
    NonFinite { context: String, sample: usize },

    #[error("divergence at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("sample id mismatch: estimates and truths are not aligned at row {row}")]
    IdMismatch { row: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("all runs in the search failed")]
    AllRunsFailed,

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

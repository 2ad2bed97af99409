use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: missing {}", .0.display())]
    Layout(PathBuf),

    #[error("mask pairing error: no ground-truth mask for {}", .0.display())]
    MaskPairing(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint load error: {reason} (offending arrays: {names:?})")]
    Load { reason: String, names: Vec<String> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at epoch {epoch} step {step}: l_feat={l_feat} l_imgfeat={l_imgfeat}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        l_feat: f64,
        l_imgfeat: f64,
    },

    #[error("image error for {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn load(reason: impl Into<String>, names: Vec<String>) -> Self {
        Error::Load {
            reason: reason.into(),
            names,
        }
    }

    /// True for errors caused by bad user input rather than internal failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Layout(_)
                | Error::MaskPairing(_)
                | Error::Config(_)
                | Error::Usage(_)
                | Error::Load { .. }
                | Error::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

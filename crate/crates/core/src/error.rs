//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation precondition (e.g. stepping a finished episode).
    #[error("usage error: {0}")]
    Usage(String),

    /// A domain or task failed its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Dataset construction or sampling failed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A numeric quantity became non-finite. Carries the site that detected it.
    #[error("non-finite value in {site}: {detail}")]
    NonFinite { site: String, detail: String },

    /// Configuration file rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or incompatible serialized artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidSpec(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn non_finite(site: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            site: site.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input left the valid domain of the operation.
    #[error("domain error: {what} = {value} ({reason})")]
    Domain {
        what: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// The x2-gradient exceeded the overflow guard near the x2 = 0 boundary.
    #[error("singular region at (x1 = {x1}, x2 = {x2}): gradient magnitude {magnitude:e} exceeds guard")]
    SingularRegion { x1: f64, x2: f64, magnitude: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("training diverged: loss increased for {0} consecutive steps")]
    Diverged(usize),

    #[error("refusing to export an empty table to {}", path.display())]
    EmptyTable { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, reason: &'static str) -> Self {
        Error::Domain {
            what,
            value,
            reason,
        }
    }
}

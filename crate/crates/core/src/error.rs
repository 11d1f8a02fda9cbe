use std::path::PathBuf;

use thiserror::Error;

use crate::netmodel::{BranchId, BusId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad arguments or configuration supplied by the caller.
    Usage,
    /// Unreadable, malformed or inconsistent input data.
    Data,
    /// A solve or factorization broke down.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid case: {0}")]
    Model(String),

    #[error("unknown bus {0}")]
    UnknownBus(BusId),

    #[error("unknown branch {0}")]
    UnknownBranch(BranchId),

    #[error("topologies belong to different cases ({0} vs {1})")]
    CaseMismatch(String, String),

    #[error("topology is islanded into {} components: {}", .components.len(), format_components(.components))]
    Islanding { components: Vec<Vec<BusId>> },

    #[error("outage of branch {0} islands the grid (bridge edge)")]
    Bridge(BranchId),

    #[error("branch {0} is not active in the topology")]
    InactiveBranch(BranchId),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::Singular(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_components(components: &[Vec<BusId>]) -> String {
    components
        .iter()
        .map(|c| {
            let shown: Vec<String> = c.iter().take(8).map(|b| b.to_string()).collect();
            if c.len() > 8 {
                format!("[{} ... ({} buses)]", shown.join(" "), c.len())
            } else {
                format!("[{}]", shown.join(" "))
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

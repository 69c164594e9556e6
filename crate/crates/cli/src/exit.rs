//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | command-line usage |
//! | 3 | invalid or unreadable configuration file |
//! | 4 | missing input artifact or other I/O failure |
//! | 5 | corrupt file, header or checksum mismatch |
//! | 6 | numerical failure (non-finite values) |

use std::fmt;

pub const OTHER: i32 = 1;
pub const USAGE: i32 = 2;
pub const CONFIG: i32 = 3;
pub const IO: i32 = 4;
pub const FORMAT: i32 = 5;
pub const NUMERICAL: i32 = 6;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A required input artifact is absent.
#[derive(Debug)]
pub struct MissingFile(pub std::path::PathBuf);

impl fmt::Display for MissingFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing input file {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<MissingFile>() || cause.is::<std::io::Error>() {
            return IO;
        }
        if let Some(e) = cause.downcast_ref::<pcm_core::Error>() {
            use pcm_core::Error as E;
            return match e {
                E::Config(_) | E::UnknownTag { .. } | E::Schedule(_) => CONFIG,
                E::Io(_) => IO,
                E::Format(_) | E::Checksum { .. } | E::Shape { .. } => FORMAT,
                E::NonFinite { .. } => NUMERICAL,
            };
        }
    }
    OTHER
}

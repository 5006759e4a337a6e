//! Pipeline orchestration: run configuration, manifest and lockfile,
//! stage implementations and figure output for the `dlalign` tool.

pub mod config;
pub mod manifest;
pub mod plots;
pub mod stages;

pub use config::{AblationConfig, AlignConfig, EvalConfig, GapConfig, GapPreset, IoConfig, Method, MotionsConfig, RunConfig, SysIdConfig};
pub use manifest::{file_digest, DirLock, RunManifest, StageRecord};
pub use stages::{motion_plan, MotionEntry, Pipeline};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIGEST: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Locked(_) | Error::InvalidParams(_) => EXIT_CONFIG,
        Error::Digest(_) | Error::Format { .. } => EXIT_DIGEST,
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

//! Process-boundary contract for segmentation, feature-extraction and
//! train/predict backends.
//!
//! Backends are executables exchanging files with the orchestrator:
//!
//! ```text
//! <exe> segment  --plan <plan.json> --prompt <seed.mask> --out <dir>
//!     -> <dir>/frame_<k>.mask (u8 raw), <dir>/confidence.csv (frame_index,confidence)
//! <exe> features --manifest <manifest.json> --out <features.csv>
//!     -> study_id,disc,dim0,dim1,...
//! <exe> train    --pairs <pairs.csv> --model-out <path>
//! <exe> predict  --model <path> --manifest <manifest.json> --out <dir>
//!     -> <dir>/<study_id>.mask (u8 raw, whole volume)
//! ```
//!
//! Exit status 0 is success; anything else is reported with the captured
//! standard error.

mod invoke;
mod process;
pub mod wire;

use std::collections::BTreeMap;
use std::env;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::SliceMask;
use crate::plan::FrameRef;
use crate::volume::VolumeError;

pub use invoke::{
    invoke_features, invoke_predict, invoke_segmentation, invoke_training, validate_segmentation_result,
    ModelHandle, TrainingJob, TrainingPair,
};
pub use process::run_backend;

/// Environment variable holding extra directories (`:`-separated) searched
/// for backend executables given by bare name.
pub const BACKEND_PATH_ENV: &str = "PARASEG_BACKEND_PATH";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {name}: executable {path} not found or not runnable")]
    MissingExecutable { name: String, path: PathBuf },
    #[error("backend {name} has kind {got:?}, expected {expected:?}")]
    WrongKind { name: String, expected: BackendKind, got: BackendKind },
    #[error("backend {name} exited with {code:?}: {stderr}")]
    Crashed { name: String, code: Option<i32>, stderr: String },
    #[error("backend {name} timed out after {secs} s")]
    Timeout { name: String, secs: f64 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl BackendError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BackendError::Io { path: path.into(), source }
    }

    pub(crate) fn violation(msg: impl Into<String>) -> Self {
        BackendError::ProtocolViolation(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Segment,
    Features,
    TrainPredict,
}

fn default_timeout() -> f64 {
    3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    #[serde(default)]
    pub name: String,
    pub executable: PathBuf,
    pub kind: BackendKind,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn new(name: impl Into<String>, executable: impl Into<PathBuf>, kind: BackendKind) -> Self {
        Self {
            name: name.into(),
            executable: executable.into(),
            kind,
            timeout_secs: default_timeout(),
            env: BTreeMap::new(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn expect_kind(&self, kind: BackendKind) -> Result<(), BackendError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BackendError::WrongKind { name: self.name.clone(), expected: kind, got: self.kind })
        }
    }

    /// Locate the executable: paths with a separator are used as given, bare
    /// names are searched in `PARASEG_BACKEND_PATH` and then `PATH`.
    pub fn resolve(&self) -> Result<PathBuf, BackendError> {
        let missing = || BackendError::MissingExecutable { name: self.name.clone(), path: self.executable.clone() };
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Precondition(format!(
                "backend {}: timeout must be positive",
                self.name
            )));
        }
        if self.executable.components().count() > 1 || self.executable.is_absolute() {
            return is_runnable(&self.executable).then(|| self.executable.clone()).ok_or_else(missing);
        }
        let dirs = [env::var_os(BACKEND_PATH_ENV), env::var_os("PATH")];
        dirs.iter()
            .flatten()
            .flat_map(env::split_paths)
            .map(|d| d.join(&self.executable))
            .find(|p| is_runnable(p))
            .ok_or_else(missing)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        self.resolve().map(|_| ())
    }
}

fn is_runnable(path: &Path) -> bool {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        path.metadata().map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false)
    }
    #[cfg(not(unix))]
    {
        path.is_file()
    }
}

/// A per-frame pseudo-label with the backend's confidence in it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub frame: FrameRef,
    pub mask: SliceMask,
    pub confidence: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_defaults_from_json() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"executable": "seg", "kind": "segment"}"#).unwrap();
        assert_eq!(d.timeout_secs, 3600.0);
        assert!(d.env.is_empty());
        assert!(d.expect_kind(BackendKind::Features).is_err());
    }

    #[test]
    fn missing_executable_names_the_descriptor() {
        let d = BackendDescriptor::new("sam", "/nonexistent/dir/sam2-adapter", BackendKind::Segment);
        match d.validate() {
            Err(BackendError::MissingExecutable { name, .. }) => assert_eq!(name, "sam"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bare_names_are_searched_on_path() {
        let d = BackendDescriptor::new("shell", "sh", BackendKind::Segment);
        assert!(d.resolve().unwrap().ends_with("sh"));
    }
}

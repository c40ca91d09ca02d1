//! Mapping of failures to exit codes and the JSON error line on stderr.

use std::fmt;
use std::path::PathBuf;

use pulsebp_core::features::{DatasetError, FeatureError};
use pulsebp_core::preprocess::{FilterError, PreprocessError};
use pulsebp_core::segmentation::SegmentationError;
use pulsebp_core::waveform::RecordError;
use pulsebp_model::training::TrainError;
use pulsebp_model::ModelError;
use pulsebp_tensorgrad::TensorError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Validation,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Validation => 3,
            ErrorKind::Data => 4,
            ErrorKind::Numeric => 5,
        }
    }
}

/// An error raised by the CLI itself with an explicit kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Context naming the file an error concerns.
#[derive(Debug, Clone)]
pub struct AtPath(pub PathBuf);

impl fmt::Display for AtPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFiniteDetected { .. } | TensorError::NonFiniteGradient { .. } => ErrorKind::Numeric,
        TensorError::InvalidArgument(_) => ErrorKind::Validation,
        _ => ErrorKind::Data,
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::Tensor(t) => tensor_kind(t),
        ModelError::NonFinite(_) => ErrorKind::Numeric,
        ModelError::InvalidConfig(_) | ModelError::OddDimension(_) | ModelError::IndivisibleLength { .. } => {
            ErrorKind::Validation
        }
        _ => ErrorKind::Data,
    }
}

fn filter_kind(e: &FilterError) -> ErrorKind {
    match e {
        FilterError::InvalidSpec(_) | FilterError::InvalidParameter(_) => ErrorKind::Validation,
        _ => ErrorKind::Data,
    }
}

fn known_kind(e: &(dyn std::error::Error + 'static)) -> Option<ErrorKind> {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return Some(f.kind);
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return Some(match t {
            TrainError::NonFiniteLoss { .. } | TrainError::Diverged { .. } => ErrorKind::Numeric,
            TrainError::InvalidConfig(_) => ErrorKind::Validation,
            TrainError::Model(m) => model_kind(m),
            _ => ErrorKind::Data,
        });
    }
    if let Some(m) = e.downcast_ref::<ModelError>() {
        return Some(model_kind(m));
    }
    if let Some(t) = e.downcast_ref::<TensorError>() {
        return Some(tensor_kind(t));
    }
    if let Some(p) = e.downcast_ref::<PreprocessError>() {
        return Some(match p {
            PreprocessError::Filter(f) => filter_kind(f),
            _ => ErrorKind::Data,
        });
    }
    if let Some(f) = e.downcast_ref::<FilterError>() {
        return Some(filter_kind(f));
    }
    if let Some(s) = e.downcast_ref::<SegmentationError>() {
        return Some(match s {
            SegmentationError::InvalidParameter(_) => ErrorKind::Validation,
            _ => ErrorKind::Data,
        });
    }
    let data = e.is::<RecordError>()
        || e.is::<DatasetError>()
        || e.is::<FeatureError>()
        || e.is::<std::io::Error>()
        || e.is::<csv::Error>()
        || e.is::<serde_json::Error>();
    data.then_some(ErrorKind::Data)
}

/// Kind of the outermost recognised cause; data errors by default.
pub fn classify(err: &anyhow::Error) -> ErrorKind {
    err.chain().find_map(known_kind).unwrap_or(ErrorKind::Data)
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: ErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

impl ErrorReport {
    pub fn from_error(err: &anyhow::Error) -> Self {
        Self {
            error: classify(err),
            path: err.downcast_ref::<AtPath>().map(|p| p.0.display().to_string()),
            message: format!("{err:#}"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable error report")
    }
}

use std::fmt;

use crate::domain::ProblemDetail;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Download,
    Decode,
    Segmentation,
    Detection,
    Clustering,
    Scoring,
    Aggregation,
    Gallery,
    Storage,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Download => "download",
            Stage::Decode => "decode",
            Stage::Segmentation => "segmentation",
            Stage::Detection => "detection",
            Stage::Clustering => "clustering",
            Stage::Scoring => "scoring",
            Stage::Aggregation => "aggregation",
            Stage::Gallery => "gallery",
            Stage::Storage => "storage",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to decode media at t={timestamp:.3}s: {message}")]
    MediaDecode { timestamp: f64, message: String },

    #[error("unsupported media: {0}")]
    UnsupportedMedia(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("region descriptor extraction failed: {0}")]
    Extractor(String),

    #[error("face detection failed: {0}")]
    Detector(String),

    #[error("scorer backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{stage} stage failed: {source}")]
    AtStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::AtStage { .. } => e,
            other => Error::AtStage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::AtStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// The innermost error, with any stage wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Maps the error onto an RFC 7807 problem payload.
    pub fn to_problem(&self, instance: &str) -> ProblemDetail {
        let (status, slug, title) = match self.root() {
            Error::MediaDecode { .. } | Error::UnsupportedMedia(_) => {
                (415, "undecodable-media", "Media could not be decoded")
            }
            Error::Backend { .. } => (502, "backend-error", "Scorer backend failed"),
            Error::MetricUndefined(_) => (422, "metric-undefined", "Metric is undefined"),
            Error::Spec(_) | Error::Input(_) => (400, "invalid-input", "Invalid input"),
            Error::Invariant(_) | Error::Precondition(_) => {
                (422, "pipeline-error", "Media could not be processed")
            }
            Error::Extractor(_) | Error::Detector(_) | Error::Io(_) | Error::AtStage { .. } => {
                (500, "stage-failed", "Processing stage failed")
            }
        };
        ProblemDetail::new(status, slug, title, self.to_string(), instance)
    }
}

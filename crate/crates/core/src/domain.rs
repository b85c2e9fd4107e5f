//! Shared domain types and the pipeline configuration.
//!
//! Everything here is an immutable value once built. The JSON forms of
//! [`ScoreReport`], [`Job`] and [`ProblemDetail`] are the wire contract of the
//! HTTP service and the CLI.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on unit-norm checks.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub const PROBLEM_CONTENT_TYPE: &str = "application/problem+json";
pub const PROBLEM_TYPE_PREFIX: &str = "urn:problem-type:dfscan:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Video,
}

/// A downloaded image or video plus its decode metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaResource {
    pub kind: MediaKind,
    pub source_url: String,
    pub local_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u64>,
}

impl MediaResource {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invariant(format!(
                "media dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        match self.kind {
            MediaKind::Video => {
                let fps = self.fps.unwrap_or(0.0);
                let duration = self.duration.unwrap_or(0.0);
                if !(fps > 0.0 && fps.is_finite()) || !(duration > 0.0 && duration.is_finite()) {
                    return Err(Error::Invariant(format!(
                        "video needs positive fps and duration (fps={fps}, duration={duration})"
                    )));
                }
            }
            MediaKind::Image => {
                if self.frame_count.is_some() {
                    return Err(Error::Invariant(
                        "image must not carry a frame count".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn fps(&self) -> f64 {
        self.fps.unwrap_or(0.0)
    }

    pub fn duration(&self) -> f64 {
        self.duration.unwrap_or(0.0)
    }
}

/// One decoded frame.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub index: u64,
    pub timestamp: f64,
    pub pixels: Arc<RgbImage>,
}

/// Region-level descriptors of a single frame. Every descriptor has the same
/// dimension and unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptorSet {
    timestamp: f64,
    dim: usize,
    data: Vec<f64>,
}

impl RegionDescriptorSet {
    pub fn new(timestamp: f64, descriptors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = descriptors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Invariant("descriptor set must not be empty".into()))?;
        if dim == 0 {
            return Err(Error::Invariant(
                "descriptor dimension must be positive".into(),
            ));
        }
        let mut data = Vec::with_capacity(dim * descriptors.len());
        for (i, v) in descriptors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Invariant(format!(
                    "descriptor {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Invariant(format!(
                    "descriptor {i} is not unit-normalized (norm {norm})"
                )));
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            timestamp,
            dim,
            data,
        })
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
}

/// A contiguous `[start, end)` interval of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Timestamps of the segmentation frames falling inside the shot.
    pub frame_timestamps: Vec<f64>,
}

impl Shot {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBox {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 <= width as i64 && self.y1 <= height as i64
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Self {
        let (w, h) = (width as i64, height as i64);
        Self {
            x0: self.x0.clamp(0, w),
            y0: self.y0.clamp(0, h),
            x1: self.x1.clamp(0, w),
            y1: self.y1.clamp(0, h),
        }
    }
}

/// A detected face crop within a shot.
#[derive(Debug, Clone)]
pub struct FaceObservation {
    pub shot_index: usize,
    pub frame_index: u64,
    pub timestamp: f64,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub crop: Arc<RgbImage>,
    pub embedding: Option<Vec<f64>>,
    pub score: Option<f64>,
}

/// A connected component of the face similarity graph of one shot.
#[derive(Debug, Clone)]
pub struct FaceCluster {
    pub cluster_id: usize,
    pub members: Vec<FaceObservation>,
    pub cluster_score: Option<f64>,
}

/// Hierarchical prediction tree returned to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub media_kind: MediaKind,
    pub overall: Option<f64>,
    pub no_faces_detected: bool,
    pub shots: Vec<ShotReport>,
    pub pipeline_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotReport {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub sampled_frames: usize,
    pub shot_score: Option<f64>,
    pub clusters: Vec<ClusterReport>,
    pub gallery_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_id: usize,
    pub cluster_score: f64,
    pub faces: Vec<FaceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    pub timestamp: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoreReport {
    /// Compact JSON; the byte form served by the API and printed by the CLI.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("score report serializes")
    }

    /// Recomputes the aggregation tree from the leaf face scores and checks
    /// every stored level against it.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let mut best: Option<f64> = None;
        for shot in &self.shots {
            let mut shot_best: Option<f64> = None;
            for cluster in &shot.clusters {
                if cluster.faces.is_empty() {
                    return Err(Error::Invariant(format!(
                        "shot {} cluster {} has no faces",
                        shot.index, cluster.cluster_id
                    )));
                }
                let mean =
                    cluster.faces.iter().map(|f| f.score).sum::<f64>() / cluster.faces.len() as f64;
                if !close(mean, cluster.cluster_score) {
                    return Err(Error::Invariant(format!(
                        "shot {} cluster {} score {} != mean {}",
                        shot.index, cluster.cluster_id, cluster.cluster_score, mean
                    )));
                }
                shot_best =
                    Some(shot_best.map_or(cluster.cluster_score, |b| b.max(cluster.cluster_score)));
            }
            match (shot_best, shot.shot_score) {
                (None, None) => {}
                (Some(a), Some(b)) if close(a, b) => {}
                (expected, got) => {
                    return Err(Error::Invariant(format!(
                        "shot {} score {got:?} != max of clusters {expected:?}",
                        shot.index
                    )))
                }
            }
            if let Some(s) = shot.shot_score {
                best = Some(best.map_or(s, |b| b.max(s)));
            }
        }
        match (best, self.overall) {
            (None, None) if self.no_faces_detected => Ok(()),
            (Some(a), Some(b)) if close(a, b) && !self.no_faces_detected => Ok(()),
            (expected, got) => Err(Error::Invariant(format!(
                "overall {got:?} (no_faces_detected={}) != max of shots {expected:?}",
                self.no_faces_detected
            ))),
        }
    }

    /// Compares two reports on structure and scores, ignoring gallery
    /// references. Scores and times compare within `tol`, boxes exactly.
    pub fn same_analysis(&self, other: &ScoreReport, tol: f64) -> std::result::Result<(), String> {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let opt_close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => close(a, b),
            _ => false,
        };
        if self.media_kind != other.media_kind {
            return Err(format!(
                "media kind {:?} != {:?}",
                self.media_kind, other.media_kind
            ));
        }
        if !opt_close(self.overall, other.overall)
            || self.no_faces_detected != other.no_faces_detected
        {
            return Err(format!("overall {:?} != {:?}", self.overall, other.overall));
        }
        if self.pipeline_version != other.pipeline_version {
            return Err(format!(
                "version {} != {}",
                self.pipeline_version, other.pipeline_version
            ));
        }
        if self.shots.len() != other.shots.len() {
            return Err(format!(
                "{} shots != {} shots",
                self.shots.len(),
                other.shots.len()
            ));
        }
        for (a, b) in self.shots.iter().zip(&other.shots) {
            let ctx = format!("shot {}", a.index);
            if a.index != b.index || !close(a.start, b.start) || !close(a.end, b.end) {
                return Err(format!(
                    "{ctx}: interval [{}, {}) != [{}, {})",
                    a.start, a.end, b.start, b.end
                ));
            }
            if a.sampled_frames != b.sampled_frames {
                return Err(format!(
                    "{ctx}: sampled {} != {}",
                    a.sampled_frames, b.sampled_frames
                ));
            }
            if !opt_close(a.shot_score, b.shot_score) {
                return Err(format!(
                    "{ctx}: score {:?} != {:?}",
                    a.shot_score, b.shot_score
                ));
            }
            if a.clusters.len() != b.clusters.len() {
                return Err(format!(
                    "{ctx}: {} clusters != {}",
                    a.clusters.len(),
                    b.clusters.len()
                ));
            }
            for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
                let ctx = format!("{ctx} cluster {}", ca.cluster_id);
                if ca.cluster_id != cb.cluster_id || !close(ca.cluster_score, cb.cluster_score) {
                    return Err(format!(
                        "{ctx}: score {} != {}",
                        ca.cluster_score, cb.cluster_score
                    ));
                }
                if ca.faces.len() != cb.faces.len() {
                    return Err(format!(
                        "{ctx}: {} faces != {}",
                        ca.faces.len(),
                        cb.faces.len()
                    ));
                }
                for (fa, fb) in ca.faces.iter().zip(&cb.faces) {
                    if !close(fa.timestamp, fb.timestamp)
                        || fa.bbox != fb.bbox
                        || !close(fa.score, fb.score)
                    {
                        return Err(format!("{ctx}: face {fa:?} != {fb:?}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Normalization statistics applied to face tensors, per RGB channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub const IMAGENET: ChannelStats = ChannelStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self::IMAGENET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Segmentation frames per second.
    pub segmentation_rate: f64,
    /// Minimum shot length in seconds.
    pub min_shot_len: f64,
    /// Scale applied to the squared detection box.
    pub face_margin: f64,
    pub max_frames_per_shot: usize,
    /// Faces are linked when embedding similarity is strictly greater.
    pub cluster_sim_threshold: f64,
    /// Clusters with fewer members than this fraction of the sampled frames are dropped.
    pub cluster_min_frac: f64,
    /// Side of the square face tensor.
    pub input_side: u32,
    /// Fixed peak threshold on the distance series. `None` selects
    /// `max(0.3, mean + 2·stddev)` per video.
    pub peak_threshold: Option<f64>,
    pub normalization: ChannelStats,
    /// Largest batch handed to a scorer backend in one call.
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segmentation_rate: 1.0,
            min_shot_len: 1.5,
            face_margin: 1.3,
            max_frames_per_shot: 64,
            cluster_sim_threshold: 0.8,
            cluster_min_frac: 0.2,
            input_side: 300,
            peak_threshold: None,
            normalization: ChannelStats::IMAGENET,
            batch_size: 32,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Spec(format!(
                    "{name} must be strictly positive, got {v}"
                )))
            }
        };
        positive("segmentation_rate", self.segmentation_rate)?;
        positive("min_shot_len", self.min_shot_len)?;
        if let Some(t) = self.peak_threshold {
            positive("peak_threshold", t)?;
        }
        if !(self.face_margin >= 1.0 && self.face_margin.is_finite()) {
            return Err(Error::Spec(format!(
                "face_margin must be >= 1, got {}",
                self.face_margin
            )));
        }
        for (name, v) in [
            ("cluster_sim_threshold", self.cluster_sim_threshold),
            ("cluster_min_frac", self.cluster_min_frac),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Spec(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.max_frames_per_shot == 0 || self.input_side == 0 || self.batch_size == 0 {
            return Err(Error::Spec(
                "max_frames_per_shot, input_side and batch_size must be positive".into(),
            ));
        }
        if self
            .normalization
            .std
            .iter()
            .any(|s| s.is_nan() || *s <= 0.0)
        {
            return Err(Error::Spec("normalization std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Processing,
    Completed,
    Failed,
}

impl JobState {
    pub fn can_transition_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Processing)
                | (JobState::Processing, JobState::Completed)
                | (JobState::Processing, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }
}

/// Asynchronous request lifecycle record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub url: String,
    /// Set when the job reaches a terminal state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemDetail>,
}

impl Job {
    pub fn validate(&self) -> Result<()> {
        match self.state {
            JobState::Completed if self.result_ref.is_none() => {
                Err(Error::Invariant("completed job without result".into()))
            }
            JobState::Failed if self.problem.is_none() => {
                Err(Error::Invariant("failed job without problem".into()))
            }
            _ => Ok(()),
        }
    }
}

/// RFC 7807 problem payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDetail {
    #[serde(rename = "type")]
    pub type_uri: String,
    pub title: String,
    pub status: u16,
    pub detail: String,
    pub instance: String,
}

impl ProblemDetail {
    /// Builds a problem whose type URI is derived from `slug`. Status codes
    /// outside 400..=599 are coerced to 500.
    pub fn new(
        status: u16,
        slug: &str,
        title: impl Into<String>,
        detail: impl Into<String>,
        instance: impl Into<String>,
    ) -> Self {
        let status = if (400..=599).contains(&status) {
            status
        } else {
            500
        };
        Self {
            type_uri: format!("{PROBLEM_TYPE_PREFIX}{slug}"),
            title: title.into(),
            status,
            detail: detail.into(),
            instance: instance.into(),
        }
    }

    pub fn slug(&self) -> Option<&str> {
        self.type_uri.strip_prefix(PROBLEM_TYPE_PREFIX)
    }

    /// Checks the payload shape: status in 400..=599, non-empty type and title.
    pub fn validate(&self) -> Result<()> {
        if !(400..=599).contains(&self.status) {
            return Err(Error::Invariant(format!(
                "problem status {} out of range",
                self.status
            )));
        }
        if self.type_uri.is_empty() || !self.type_uri.contains(':') {
            return Err(Error::Invariant(format!(
                "problem type `{}` is not a URI",
                self.type_uri
            )));
        }
        if self.title.is_empty() {
            return Err(Error::Invariant("problem title is empty".into()));
        }
        Ok(())
    }
}

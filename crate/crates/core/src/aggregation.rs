//! Score aggregation: faces average into clusters, a shot takes its best
//! cluster and the video takes its best shot.

use crate::domain::{
    ClusterReport, FaceCluster, FaceReport, MediaKind, ScoreReport, Shot, ShotReport,
};
use crate::error::{Error, Result};

pub fn aggregate_cluster(face_scores: &[f64]) -> Result<f64> {
    if face_scores.is_empty() {
        return Err(Error::Invariant("cannot aggregate an empty cluster".into()));
    }
    if let Some(bad) = face_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Invariant(format!("face score {bad} outside [0, 1]")));
    }
    Ok(face_scores.iter().sum::<f64>() / face_scores.len() as f64)
}

/// Maximum cluster score; `None` for a shot without surviving clusters.
pub fn aggregate_shot(cluster_scores: &[f64]) -> Option<f64> {
    cluster_scores.iter().copied().reduce(f64::max)
}

/// Maximum over the shots that have a score.
pub fn aggregate_video(shot_scores: &[Option<f64>]) -> Option<f64> {
    shot_scores.iter().flatten().copied().reduce(f64::max)
}

/// A processed shot ready for reporting: the shot, its surviving clusters
/// with scored members, and how many frames were sampled from it.
#[derive(Debug, Clone)]
pub struct ShotOutcome {
    pub shot: Shot,
    pub sampled_frames: usize,
    pub clusters: Vec<FaceCluster>,
    pub gallery_ref: Option<String>,
}

/// Assembles the report, computing cluster, shot and overall scores.
pub fn build_score_report(
    media_kind: MediaKind,
    outcomes: Vec<ShotOutcome>,
    pipeline_version: &str,
) -> Result<ScoreReport> {
    let mut shots = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let mut clusters = Vec::with_capacity(outcome.clusters.len());
        for cluster in outcome.clusters {
            let faces = cluster
                .members
                .iter()
                .map(|m| {
                    m.score.map(|score| FaceReport {
                        timestamp: m.timestamp,
                        bbox: m.bbox,
                        score,
                    })
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| {
                    Error::Invariant(format!(
                        "shot {} cluster {} has unscored faces",
                        outcome.shot.index, cluster.cluster_id
                    ))
                })?;
            let scores: Vec<f64> = faces.iter().map(|f| f.score).collect();
            clusters.push(ClusterReport {
                cluster_id: cluster.cluster_id,
                cluster_score: aggregate_cluster(&scores)?,
                faces,
            });
        }
        let cluster_scores: Vec<f64> = clusters.iter().map(|c| c.cluster_score).collect();
        shots.push(ShotReport {
            index: outcome.shot.index,
            start: outcome.shot.start,
            end: outcome.shot.end,
            sampled_frames: outcome.sampled_frames,
            shot_score: aggregate_shot(&cluster_scores),
            clusters,
            gallery_ref: outcome.gallery_ref,
        });
    }
    let shot_scores: Vec<Option<f64>> = shots.iter().map(|s| s.shot_score).collect();
    let overall = aggregate_video(&shot_scores);
    Ok(ScoreReport {
        media_kind,
        overall,
        no_faces_detected: overall.is_none(),
        shots,
        pipeline_version: pipeline_version.to_string(),
    })
}

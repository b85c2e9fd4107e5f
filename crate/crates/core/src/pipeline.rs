//! End-to-end analysis of a decoded media resource.
//!
//! Videos are segmented into shots, and shots are processed in parallel on a
//! dedicated thread pool: sample frames, detect faces, cluster, filter,
//! score, render the gallery. Results are collected by shot index, so the
//! report does not depend on scheduling. Images go straight to detection and
//! scoring, each face forming its own cluster.

use std::sync::Arc;

use rayon::prelude::*;

use crate::aggregation::{build_score_report, ShotOutcome};
use crate::domain::{
    FaceCluster, FaceObservation, FrameSample, MediaKind, PipelineConfig, ScoreReport, Shot,
};
use crate::error::{Error, Result, Stage};
use crate::faces::{self, FaceDetector, FaceEmbedder, FrameWarning};
use crate::gallery::{self, Keyframe};
use crate::media::Media;
use crate::scoring::{self, ScorerBackend};
use crate::segmentation::{self, DistanceSeries, RegionDescriptorExtractor};

/// Output of [`Analyzer::analyze`].
#[derive(Debug)]
pub struct Analysis {
    pub report: ScoreReport,
    /// PNG galleries keyed by shot index.
    pub galleries: Vec<(usize, Vec<u8>)>,
    /// Segmentation distance series (videos only).
    pub distances: Option<DistanceSeries>,
    pub warnings: Vec<FrameWarning>,
}

/// The analysis backends and settings.
#[derive(Clone)]
pub struct Analyzer {
    pub config: PipelineConfig,
    pub extractor: Arc<dyn RegionDescriptorExtractor>,
    pub detector: Arc<dyn FaceDetector>,
    pub embedder: Arc<dyn FaceEmbedder>,
    pub ensemble: Vec<Arc<dyn ScorerBackend>>,
    pub version: String,
    /// Threads used for shot-level parallelism.
    pub workers: usize,
    pub render_galleries: bool,
}

impl std::fmt::Debug for Analyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyzer")
            .field("config", &self.config)
            .field(
                "ensemble",
                &self
                    .ensemble
                    .iter()
                    .map(|b| b.name().to_string())
                    .collect::<Vec<_>>(),
            )
            .field("version", &self.version)
            .field("workers", &self.workers)
            .finish()
    }
}

struct ShotWork {
    outcome: ShotOutcome,
    gallery: Option<Vec<u8>>,
    warnings: Vec<FrameWarning>,
}

impl Analyzer {
    /// An analyzer using the reference extractor, detector and embedder with
    /// the given ensemble. Uses all available cores and renders galleries.
    pub fn new(
        config: PipelineConfig,
        ensemble: Vec<Arc<dyn ScorerBackend>>,
        version: impl Into<String>,
    ) -> Self {
        Self {
            config,
            extractor: Arc::new(segmentation::GridHistogramExtractor),
            detector: Arc::new(faces::MarkerFaceDetector::default()),
            embedder: Arc::new(faces::MeanColorEmbedder),
            ensemble,
            version: version.into(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            render_galleries: true,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Runs the pipeline. `gallery_prefix`, when given, is used to build each
    /// shot's `gallery_ref` as `{prefix}/{shot_index}.png`.
    pub fn analyze(&self, media: &Media, gallery_prefix: Option<&str>) -> Result<Analysis> {
        self.config.validate()?;
        if self.ensemble.is_empty() {
            return Err(Error::Precondition("no scorer backends configured".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .thread_name(|i| format!("shot-worker-{i}"))
            .build()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        pool.install(|| match media.kind() {
            MediaKind::Video => self.analyze_video(media, gallery_prefix),
            MediaKind::Image => self.analyze_image(media, gallery_prefix),
        })
    }

    fn analyze_video(&self, media: &Media, gallery_prefix: Option<&str>) -> Result<Analysis> {
        let (shots, series) =
            segmentation::segment_video_with_series(media, &*self.extractor, &self.config)
                .map_err(|e| e.at(Stage::Segmentation))?;
        let work: Vec<ShotWork> = shots
            .into_par_iter()
            .map(|shot| self.process_shot(media, shot, gallery_prefix))
            .collect::<Result<_>>()?;
        self.finish(MediaKind::Video, work, Some(series))
    }

    fn analyze_image(&self, media: &Media, gallery_prefix: Option<&str>) -> Result<Analysis> {
        let frame = media.frame(0).map_err(|e| e.at(Stage::Decode))?;
        let (faces, warnings) = faces::detect_faces(
            std::slice::from_ref(&frame),
            &*self.detector,
            &self.config,
            0,
        );
        let mut faces = faces;
        faces.sort_by(|a, b| a.bbox.x0.cmp(&b.bbox.x0).then(a.bbox.y0.cmp(&b.bbox.y0)));
        let clusters: Vec<FaceCluster> = faces
            .into_iter()
            .enumerate()
            .map(|(i, f)| FaceCluster {
                cluster_id: i,
                members: vec![f],
                cluster_score: None,
            })
            .collect();
        let shot = Shot {
            index: 0,
            start: 0.0,
            end: 0.0,
            frame_timestamps: vec![0.0],
        };
        let work = self.score_and_render(shot, 1, clusters, &[frame], gallery_prefix, warnings)?;
        self.finish(MediaKind::Image, vec![work], None)
    }

    fn process_shot(
        &self,
        media: &Media,
        shot: Shot,
        gallery_prefix: Option<&str>,
    ) -> Result<ShotWork> {
        let frames = faces::sample_shot_frames(media, &shot, self.config.max_frames_per_shot)
            .map_err(|e| e.at(Stage::Decode))?;
        let (observations, warnings) =
            faces::detect_faces(&frames, &*self.detector, &self.config, shot.index);
        let clusters = faces::cluster_faces(
            observations,
            &*self.embedder,
            self.config.cluster_sim_threshold,
        )
        .map_err(|e| e.at(Stage::Clustering))?;
        let clusters = faces::filter_clusters(clusters, frames.len(), self.config.cluster_min_frac);
        let sampled = frames.len();
        self.score_and_render(shot, sampled, clusters, &frames, gallery_prefix, warnings)
    }

    fn score_and_render(
        &self,
        shot: Shot,
        sampled_frames: usize,
        mut clusters: Vec<FaceCluster>,
        frames: &[FrameSample],
        gallery_prefix: Option<&str>,
        warnings: Vec<FrameWarning>,
    ) -> Result<ShotWork> {
        let mut members: Vec<&mut FaceObservation> = clusters
            .iter_mut()
            .flat_map(|c| c.members.iter_mut())
            .collect();
        // preprocess lazily so at most one batch of tensors is alive
        for chunk in members.chunks_mut(self.config.batch_size.max(1)) {
            let tensors = chunk
                .iter()
                .map(|f| {
                    scoring::preprocess_face(
                        &f.crop,
                        self.config.input_side,
                        &self.config.normalization,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at(Stage::Scoring))?;
            let scores = scoring::score_faces(&tensors, &self.ensemble, self.config.batch_size)
                .map_err(|e| e.at(Stage::Scoring))?;
            for (face, s) in chunk.iter_mut().zip(scores) {
                face.score = Some(s);
            }
        }
        for c in clusters.iter_mut() {
            let scores: Vec<f64> = c.members.iter().filter_map(|m| m.score).collect();
            c.cluster_score = Some(
                crate::aggregation::aggregate_cluster(&scores)
                    .map_err(|e| e.at(Stage::Aggregation))?,
            );
        }

        let mut gallery = None;
        if self.render_galleries {
            let keyframes: Vec<Keyframe> = frames
                .iter()
                .filter_map(|frame| {
                    let faces: Vec<_> = clusters
                        .iter()
                        .flat_map(|c| &c.members)
                        .filter(|m| m.frame_index == frame.index)
                        .filter_map(|m| m.score.map(|s| (m.bbox, s)))
                        .collect();
                    (!faces.is_empty())
                        .then(|| Keyframe::from_frame(frame, &faces, gallery::TILE_WIDTH))
                })
                .collect();
            if !keyframes.is_empty() {
                gallery =
                    Some(gallery::render_gallery(&keyframes).map_err(|e| e.at(Stage::Gallery))?);
            }
        }
        let gallery_ref = match (&gallery, gallery_prefix) {
            (Some(_), Some(prefix)) => Some(format!(
                "{}/{}.png",
                prefix.trim_end_matches('/'),
                shot.index
            )),
            _ => None,
        };
        Ok(ShotWork {
            outcome: ShotOutcome {
                shot,
                sampled_frames,
                clusters,
                gallery_ref,
            },
            gallery,
            warnings,
        })
    }

    fn finish(
        &self,
        kind: MediaKind,
        work: Vec<ShotWork>,
        distances: Option<DistanceSeries>,
    ) -> Result<Analysis> {
        let mut outcomes = Vec::with_capacity(work.len());
        let mut galleries = Vec::new();
        let mut warnings = Vec::new();
        for w in work {
            if let Some(png) = w.gallery {
                galleries.push((w.outcome.shot.index, png));
            }
            warnings.extend(w.warnings);
            outcomes.push(w.outcome);
        }
        let report = build_score_report(kind, outcomes, &self.version)
            .map_err(|e| e.at(Stage::Aggregation))?;
        Ok(Analysis {
            report,
            galleries,
            distances,
            warnings,
        })
    }
}

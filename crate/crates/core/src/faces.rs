//! Face sampling, detection, clustering and filtering within a shot.

use std::collections::VecDeque;
use std::sync::Arc;

use image::RgbImage;

use crate::domain::{BoundingBox, FaceCluster, FaceObservation, FrameSample, PipelineConfig, Shot};
use crate::error::{Error, Result};
use crate::media::Media;
use crate::palette::MarkerColor;

/// A face detector. Implementations must be deterministic and callable
/// concurrently; returned boxes lie within the frame.
pub trait FaceDetector: Send + Sync {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<(BoundingBox, f64)>>;
}

/// Maps a face crop to an L2-normalized embedding of fixed dimension.
pub trait FaceEmbedder: Send + Sync {
    fn embedding_dimension(&self) -> usize;
    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>>;
}

/// Locates axis-aligned rectangles of the reserved marker colours.
///
/// Pixels are classified against the palette, 4-connected components of the
/// same colour are collected and a component counts as a face when it fills
/// its bounding rectangle (≥ 90%) and both sides are at least `min_side`.
/// Confidence is the fill ratio.
#[derive(Debug, Clone, Copy)]
pub struct MarkerFaceDetector {
    pub min_side: u32,
}

impl Default for MarkerFaceDetector {
    fn default() -> Self {
        Self { min_side: 4 }
    }
}

impl FaceDetector for MarkerFaceDetector {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<(BoundingBox, f64)>> {
        let img = &frame.pixels;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels: Vec<Option<MarkerColor>> =
            img.pixels().map(|p| MarkerColor::classify(p.0)).collect();
        let mut seen = vec![false; w * h];
        let mut found = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            let Some(color) = labels[start] else { continue };
            if seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let mut area = 0usize;
            while let Some(p) = queue.pop_front() {
                let (x, y) = (p % w, p / w);
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let mut visit = |q: usize| {
                    if !seen[q] && labels[q] == Some(color) {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            let (bw, bh) = (x1 - x0, y1 - y0);
            let fill = area as f64 / (bw * bh) as f64;
            if bw >= self.min_side as usize && bh >= self.min_side as usize && fill >= 0.9 {
                found.push((
                    BoundingBox::new(x0 as i64, y0 as i64, x1 as i64, y1 as i64),
                    fill,
                ));
            }
        }
        found.sort_by_key(|(b, _)| (b.y0, b.x0));
        Ok(found)
    }
}

/// Mean RGB of the crop, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanColorEmbedder;

impl FaceEmbedder for MeanColorEmbedder {
    fn embedding_dimension(&self) -> usize {
        3
    }

    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>> {
        let n = (crop.width() as u64 * crop.height() as u64) as f64;
        if n == 0.0 {
            return Err(Error::Invariant("cannot embed an empty crop".into()));
        }
        let mut sum = [0.0f64; 3];
        for px in crop.pixels() {
            for (acc, v) in sum.iter_mut().zip(px.0) {
                *acc += v as f64;
            }
        }
        let mean = sum.map(|s| s / n);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // pure black: fall back to the grey axis so the vector stays unit length
            let v = 1.0 / 3f64.sqrt();
            return Ok(vec![v; 3]);
        }
        Ok(mean.iter().map(|v| v / norm).collect())
    }
}

/// Source frame indices whose timestamps fall in `[start, end)`.
pub fn shot_frame_range(media: &Media, shot: &Shot) -> std::ops::Range<u64> {
    let fps = media.resource().fps();
    let total = media.frame_count();
    if fps <= 0.0 {
        return 0..total;
    }
    let first = ((shot.start * fps - 1e-9).ceil().max(0.0) as u64).min(total);
    let last = ((shot.end * fps - 1e-9).ceil().max(0.0) as u64).min(total);
    first..last.max(first)
}

/// Indices of at most `max_frames` frames spread uniformly over `range`.
pub fn sample_indices(range: std::ops::Range<u64>, max_frames: usize) -> Vec<u64> {
    let n = range.end - range.start;
    let m = max_frames as u64;
    if n <= m {
        return range.collect();
    }
    let mut out: Vec<u64> = (0..m)
        .map(|k| range.start + ((k as f64 * n as f64 / m as f64).round() as u64).min(n - 1))
        .collect();
    out.dedup();
    out
}

/// Decodes at most `max_frames` unique frames of the shot in timestamp order.
pub fn sample_shot_frames(
    media: &Media,
    shot: &Shot,
    max_frames: usize,
) -> Result<Vec<FrameSample>> {
    if max_frames == 0 {
        return Err(Error::Precondition("max_frames must be at least 1".into()));
    }
    let mut range = shot_frame_range(media, shot);
    if range.is_empty() {
        // shorter than one source frame; use the frame shown at the start
        let i = media.frame_index_at(shot.start);
        range = i..i + 1;
    }
    sample_indices(range, max_frames)
        .into_iter()
        .map(|i| media.frame(i))
        .collect()
}

/// Squares the box about its centre, scales the side by `margin` and clamps
/// the result to the image. Coordinates round half away from zero.
pub fn expand_and_square_box(
    bbox: BoundingBox,
    margin: f64,
    image_w: u32,
    image_h: u32,
) -> BoundingBox {
    let cx = (bbox.x0 + bbox.x1) as f64 / 2.0;
    let cy = (bbox.y0 + bbox.y1) as f64 / 2.0;
    let half = bbox.width().max(bbox.height()) as f64 * margin / 2.0;
    BoundingBox::new(
        (cx - half).round() as i64,
        (cy - half).round() as i64,
        (cx + half).round() as i64,
        (cy + half).round() as i64,
    )
    .clamp_to(image_w, image_h)
}

pub fn crop(img: &RgbImage, bbox: BoundingBox) -> RgbImage {
    image::imageops::crop_imm(
        img,
        bbox.x0 as u32,
        bbox.y0 as u32,
        bbox.width() as u32,
        bbox.height() as u32,
    )
    .to_image()
}

/// Non-fatal problems met while processing a shot.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWarning {
    pub timestamp: f64,
    pub message: String,
}

/// Runs the detector on every frame and cuts expanded crops. Frames whose
/// detection fails are skipped and reported as warnings.
pub fn detect_faces(
    frames: &[FrameSample],
    detector: &dyn FaceDetector,
    config: &PipelineConfig,
    shot_index: usize,
) -> (Vec<FaceObservation>, Vec<FrameWarning>) {
    let mut faces = Vec::new();
    let mut warnings = Vec::new();
    for frame in frames {
        let detections = match detector.detect(frame) {
            Ok(d) => d,
            Err(e) => {
                tracing::warn!(timestamp = frame.timestamp, error = %e, "skipping frame");
                warnings.push(FrameWarning {
                    timestamp: frame.timestamp,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let (w, h) = frame.pixels.dimensions();
        for (raw, confidence) in detections {
            let raw = raw.clamp_to(w, h);
            if !raw.is_valid() {
                warnings.push(FrameWarning {
                    timestamp: frame.timestamp,
                    message: format!("detector returned an empty box {raw:?}"),
                });
                continue;
            }
            let bbox = expand_and_square_box(raw, config.face_margin, w, h);
            faces.push(FaceObservation {
                shot_index,
                frame_index: frame.index,
                timestamp: frame.timestamp,
                bbox,
                confidence,
                crop: Arc::new(crop(&frame.pixels, bbox)),
                embedding: None,
                score: None,
            });
        }
    }
    (faces, warnings)
}

/// Connected components of the graph linking pairs whose similarity is
/// strictly above `threshold`. `similarity(i, j)` is queried for `i < j`.
/// Components come back as sorted member lists, ordered by smallest member.
pub fn connected_components(
    n: usize,
    threshold: f64,
    similarity: impl Fn(usize, usize) -> f64,
) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if similarity(i, j) > threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
}

fn face_order(a: &FaceObservation, b: &FaceObservation) -> std::cmp::Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then(a.bbox.x0.cmp(&b.bbox.x0))
        .then(a.bbox.y0.cmp(&b.bbox.y0))
        .then(a.bbox.x1.cmp(&b.bbox.x1))
        .then(a.bbox.y1.cmp(&b.bbox.y1))
}

/// Embeds every observation (if not embedded yet) and groups them into
/// connected components of the similarity graph. Members are ordered by
/// timestamp then box; cluster ids follow the first member of each cluster.
pub fn cluster_faces(
    mut observations: Vec<FaceObservation>,
    embedder: &dyn FaceEmbedder,
    threshold: f64,
) -> Result<Vec<FaceCluster>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition(format!(
            "cluster threshold must lie in (0, 1), got {threshold}"
        )));
    }
    for obs in observations.iter_mut() {
        if obs.embedding.is_none() {
            let v = embedder.embed(&obs.crop)?;
            if v.len() != embedder.embedding_dimension() {
                return Err(Error::Invariant(format!(
                    "embedder returned dimension {}, declared {}",
                    v.len(),
                    embedder.embedding_dimension()
                )));
            }
            obs.embedding = Some(v);
        }
    }
    let dot = |i: usize, j: usize| -> f64 {
        let a = observations[i].embedding.as_deref().unwrap_or_default();
        let b = observations[j].embedding.as_deref().unwrap_or_default();
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    };
    let groups = connected_components(observations.len(), threshold, dot);
    let mut slots: Vec<Option<FaceObservation>> = observations.into_iter().map(Some).collect();
    let mut clusters: Vec<FaceCluster> = groups
        .into_iter()
        .map(|g| {
            let mut members: Vec<FaceObservation> =
                g.into_iter().filter_map(|i| slots[i].take()).collect();
            members.sort_by(face_order);
            FaceCluster {
                cluster_id: 0,
                members,
                cluster_score: None,
            }
        })
        .collect();
    clusters.sort_by(|a, b| face_order(&a.members[0], &b.members[0]));
    for (id, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = id;
    }
    Ok(clusters)
}

/// Drops clusters with fewer than `min_frac · shot_frame_count` members.
/// Surviving clusters keep their ids.
pub fn filter_clusters(
    clusters: Vec<FaceCluster>,
    shot_frame_count: usize,
    min_frac: f64,
) -> Vec<FaceCluster> {
    let needed = min_frac * shot_frame_count.max(1) as f64;
    clusters
        .into_iter()
        .filter(|c| c.members.len() as f64 >= needed)
        .collect()
}

//! Synthetic ground-truth media.
//!
//! A [`FixtureSpec`] describes shots as solid backgrounds with square marker
//! faces planted on them. [`generate_fixture`] renders the media (Y4M for
//! video, PNG for images) and derives the report the pipeline must produce
//! when run with the reference extractor, detector, embedder and lookup
//! backends. The expected report is computed here from the spec alone; the
//! generator refuses layouts for which that derivation would not hold
//! (touching faces, crops leaving the frame, colours too close to separate
//! by embedding, and so on).

use std::collections::BTreeMap;

use image::{ImageEncoder, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    BoundingBox, ClusterReport, FaceReport, MediaKind, MediaResource, PipelineConfig, ScoreReport,
    ShotReport,
};
use crate::error::{Error, Result};
use crate::media::{encode_y4m, rgb_to_ycbcr, ycbcr_to_rgb};
use crate::palette::{is_valid_background, MarkerColor};

/// Required gap between the embedding similarity of two planted faces and
/// the clustering threshold.
pub const SIMILARITY_MARGIN: f64 = 0.02;
const PLACEMENT_ATTEMPTS: usize = 500;
const MIN_FACE_SIDE: u32 = 8;

fn default_fps() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    #[serde(default = "default_kind")]
    pub kind: MediaKind,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_fps")]
    pub fps: u32,
    /// Seeds placement of faces without explicit coordinates.
    #[serde(default)]
    pub seed: u64,
    pub shots: Vec<ShotSpec>,
}

fn default_kind() -> MediaKind {
    MediaKind::Video
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotSpec {
    /// Seconds; ignored for images.
    #[serde(default)]
    pub duration: f64,
    pub background: [u8; 3],
    #[serde(default)]
    pub faces: Vec<FaceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    pub color: MarkerColor,
    /// Score the lookup backend assigns to this colour.
    pub score: f64,
    #[serde(default)]
    pub x: Option<u32>,
    #[serde(default)]
    pub y: Option<u32>,
    /// Side of the square; defaults to an eighth of the shorter frame side.
    #[serde(default)]
    pub size: Option<u32>,
    /// Visibility window in seconds relative to the shot start, `[from, to)`.
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
}

impl FixtureSpec {
    /// A 160x120, 10 fps video with shots of 4, 5 and 6 seconds. The shots
    /// hold a partly visible face next to a steady one, a face next to a
    /// short-lived one that gets filtered, and two faces of one colour
    /// beside a third.
    pub fn sample_video() -> Self {
        let face = |color, score, x, y, size| FaceSpec {
            color,
            score,
            x: Some(x),
            y: Some(y),
            size: Some(size),
            from: None,
            to: None,
        };
        let mut partial = face(MarkerColor::Red, 0.2, 20, 30, 20);
        partial.to = Some(2.0);
        let mut brief = face(MarkerColor::Magenta, 0.95, 110, 60, 16);
        brief.from = Some(1.0);
        brief.to = Some(1.5);
        Self {
            kind: MediaKind::Video,
            width: 160,
            height: 120,
            fps: 10,
            seed: 7,
            shots: vec![
                ShotSpec {
                    duration: 4.0,
                    background: [60, 60, 60],
                    faces: vec![partial, face(MarkerColor::Blue, 0.35, 100, 50, 20)],
                },
                ShotSpec {
                    duration: 5.0,
                    background: [120, 140, 100],
                    faces: vec![face(MarkerColor::Green, 0.6, 30, 40, 24), brief],
                },
                ShotSpec {
                    duration: 6.0,
                    background: [180, 190, 200],
                    faces: vec![
                        face(MarkerColor::Yellow, 0.7, 15, 15, 20),
                        face(MarkerColor::Yellow, 0.7, 60, 70, 20),
                        face(MarkerColor::Blue, 0.35, 115, 20, 20),
                    ],
                },
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    /// Colour → score table implied by the spec.
    pub fn lookup_table(&self) -> Result<BTreeMap<MarkerColor, f64>> {
        let mut table = BTreeMap::new();
        for face in self.shots.iter().flat_map(|s| &s.faces) {
            if !(0.0..=1.0).contains(&face.score) {
                return Err(Error::Spec(format!(
                    "score {} for {} outside [0, 1]",
                    face.score, face.color
                )));
            }
            match table.insert(face.color, face.score) {
                Some(prev) if prev != face.score => {
                    return Err(Error::Spec(format!(
                        "{} is assigned two scores ({prev} and {})",
                        face.color, face.score
                    )))
                }
                _ => {}
            }
        }
        Ok(table)
    }
}

/// A face as planted, with its detection box and the expanded crop box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFace {
    pub shot: usize,
    pub color: MarkerColor,
    pub score: f64,
    pub rect: BoundingBox,
    pub expanded: BoundingBox,
    /// Source frames showing the face, `[first, end)`.
    pub frames: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    /// Shot boundary times in seconds.
    pub boundaries: Vec<f64>,
    pub faces: Vec<PlantedFace>,
    pub lookup: BTreeMap<MarkerColor, f64>,
    pub expected: ScoreReport,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    /// Encoded media: Y4M for video, PNG for images.
    pub bytes: Vec<u8>,
    pub resource: MediaResource,
    pub truth: FixtureTruth,
}

fn integral(v: f64) -> Option<u64> {
    let r = v.round();
    ((v - r).abs() < 1e-9 && r >= 0.0).then_some(r as u64)
}

/// Colour a pixel has after passing through the media encoding.
fn decoded(kind: MediaKind, rgb: [u8; 3]) -> [u8; 3] {
    match kind {
        MediaKind::Image => rgb,
        MediaKind::Video => {
            let [y, cb, cr] = rgb_to_ycbcr(rgb);
            ycbcr_to_rgb(y, cb, cr)
        }
    }
}

fn expanded_box(rect: BoundingBox, margin: f64) -> BoundingBox {
    let side = rect.width() as f64;
    let cx = rect.x0 as f64 + side / 2.0;
    let cy = rect.y0 as f64 + side / 2.0;
    let half = side * margin / 2.0;
    BoundingBox::new(
        (cx - half).round() as i64,
        (cy - half).round() as i64,
        (cx + half).round() as i64,
        (cy + half).round() as i64,
    )
}

fn intersects(a: BoundingBox, b: BoundingBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

fn grow(b: BoundingBox, by: i64) -> BoundingBox {
    BoundingBox::new(b.x0 - by, b.y0 - by, b.x1 + by, b.y1 + by)
}

/// Expected mean-colour embedding of a face crop: the face square on its
/// background.
fn expected_embedding(
    face: [u8; 3],
    background: [u8; 3],
    rect: BoundingBox,
    expanded: BoundingBox,
) -> [f64; 3] {
    let face_area = (rect.width() * rect.height()) as f64;
    let crop_area = (expanded.width() * expanded.height()) as f64;
    let mean: [f64; 3] = std::array::from_fn(|c| {
        (face_area * face[c] as f64 + (crop_area - face_area) * background[c] as f64) / crop_area
    });
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    mean.map(|v| v / norm)
}

fn spread(first: u64, end: u64, max: usize) -> Vec<u64> {
    let n = end - first;
    if n as usize <= max {
        return (first..end).collect();
    }
    let mut picked = Vec::with_capacity(max);
    for k in 0..max as u64 {
        let offset = ((k * n) as f64 / max as f64).round() as u64;
        let idx = first + offset.min(n - 1);
        if picked.last() != Some(&idx) {
            picked.push(idx);
        }
    }
    picked
}

struct ShotLayout {
    first_frame: u64,
    end_frame: u64,
    start: f64,
    end: f64,
    background: [u8; 3],
    faces: Vec<PlantedFace>,
}

/// Renders the fixture and its expected report for `config`.
pub fn generate_fixture(
    spec: &FixtureSpec,
    config: &PipelineConfig,
    pipeline_version: &str,
) -> Result<Fixture> {
    config.validate()?;
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::Spec("fixture frames must be at least 16x16".into()));
    }
    if spec.shots.is_empty() {
        return Err(Error::Spec("fixture needs at least one shot".into()));
    }
    if spec.kind == MediaKind::Image && spec.shots.len() != 1 {
        return Err(Error::Spec("an image fixture has exactly one shot".into()));
    }
    if spec.kind == MediaKind::Video && spec.fps == 0 {
        return Err(Error::Spec("fps must be positive".into()));
    }
    let lookup = spec.lookup_table()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut layouts = Vec::with_capacity(spec.shots.len());
    let mut first_frame = 0u64;
    let mut change_time = 0.0f64;
    for (index, shot) in spec.shots.iter().enumerate() {
        if !is_valid_background(shot.background) {
            return Err(Error::Spec(format!(
                "shot {index}: background {:?} must have every channel in 48..=207",
                shot.background
            )));
        }
        let (frames, start) = match spec.kind {
            MediaKind::Image => (1, 0.0),
            MediaKind::Video => {
                if shot.duration.is_nan() || shot.duration < config.min_shot_len {
                    return Err(Error::Spec(format!(
                        "shot {index}: duration {} is below the minimum shot length {}",
                        shot.duration, config.min_shot_len
                    )));
                }
                let frames = integral(shot.duration * spec.fps as f64).ok_or_else(|| {
                    Error::Spec(format!(
                        "shot {index}: duration {} is not a whole number of frames",
                        shot.duration
                    ))
                })?;
                // the boundary is seen at the first segmentation sample of the new scene
                let start = if index == 0 {
                    0.0
                } else {
                    let k = integral(change_time * config.segmentation_rate).ok_or_else(|| {
                        Error::Spec(format!(
                            "shot {index} starts at {change_time} s, off the segmentation grid of {} Hz",
                            config.segmentation_rate
                        ))
                    })?;
                    k as f64 / config.segmentation_rate
                };
                (frames, start)
            }
        };
        if let Some(prev) = layouts.last() {
            let prev: &ShotLayout = prev;
            let a = decoded(spec.kind, prev.background);
            let b = decoded(spec.kind, shot.background);
            if (0..3).any(|c| a[c] / 32 == b[c] / 32) {
                return Err(Error::Spec(format!(
                    "shot {index}: background must differ from the previous one in every channel's histogram bin"
                )));
            }
        }
        let end_frame = first_frame + frames;
        let faces = place_faces(spec, config, index, shot, first_frame, end_frame, &mut rng)?;
        layouts.push(ShotLayout {
            first_frame,
            end_frame,
            start,
            end: 0.0,
            background: shot.background,
            faces,
        });
        first_frame = end_frame;
        change_time += shot.duration;
    }
    let total_frames = first_frame;
    let duration = match spec.kind {
        MediaKind::Video => total_frames as f64 / spec.fps as f64,
        MediaKind::Image => 0.0,
    };
    for i in 0..layouts.len() {
        layouts[i].end = match layouts.get(i + 1) {
            Some(next) => next.start,
            None => duration,
        };
    }

    let expected = expected_report(spec, config, &layouts, &lookup, pipeline_version)?;
    let bytes = render(spec, &layouts, total_frames)?;
    let resource = MediaResource {
        kind: spec.kind,
        source_url: String::new(),
        local_ref: String::new(),
        width: spec.width,
        height: spec.height,
        fps: (spec.kind == MediaKind::Video).then_some(spec.fps as f64),
        duration: (spec.kind == MediaKind::Video).then_some(duration),
        frame_count: (spec.kind == MediaKind::Video).then_some(total_frames),
    };
    Ok(Fixture {
        bytes,
        resource,
        truth: FixtureTruth {
            boundaries: layouts.iter().skip(1).map(|l| l.start).collect(),
            faces: layouts.into_iter().flat_map(|l| l.faces).collect(),
            lookup,
            expected,
        },
    })
}

fn place_faces(
    spec: &FixtureSpec,
    config: &PipelineConfig,
    shot_index: usize,
    shot: &ShotSpec,
    first_frame: u64,
    end_frame: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PlantedFace>> {
    let frame = BoundingBox::new(0, 0, spec.width as i64, spec.height as i64);
    let inside = |b: BoundingBox| {
        b.x0 >= frame.x0 && b.y0 >= frame.y0 && b.x1 <= frame.x1 && b.y1 <= frame.y1
    };
    let mut placed: Vec<PlantedFace> = Vec::new();
    for (n, face) in shot.faces.iter().enumerate() {
        let size = face
            .size
            .unwrap_or((spec.width.min(spec.height) / 8).max(MIN_FACE_SIDE));
        if size < MIN_FACE_SIDE {
            return Err(Error::Spec(format!(
                "shot {shot_index} face {n}: size must be at least {MIN_FACE_SIDE}"
            )));
        }
        let frames = match spec.kind {
            MediaKind::Image => {
                if face.from.is_some() || face.to.is_some() {
                    return Err(Error::Spec(
                        "visibility windows only apply to video fixtures".into(),
                    ));
                }
                [0, 1]
            }
            MediaKind::Video => {
                let fps = spec.fps as f64;
                let at = |t: f64| first_frame + ((t * fps - 1e-9).ceil().max(0.0) as u64);
                let a = face.from.map_or(first_frame, at).min(end_frame);
                let b = face.to.map_or(end_frame, at).min(end_frame);
                [a, b.max(a)]
            }
        };
        let fits = |rect: BoundingBox| {
            let expanded = expanded_box(rect, config.face_margin);
            inside(expanded)
                && placed.iter().all(|p| {
                    !intersects(grow(rect, 1), p.rect)
                        && !intersects(expanded, p.rect)
                        && !intersects(p.expanded, rect)
                })
        };
        let square = |x: u32, y: u32| {
            BoundingBox::new(x as i64, y as i64, (x + size) as i64, (y + size) as i64)
        };
        let rect = match (face.x, face.y) {
            (Some(x), Some(y)) => {
                let rect = square(x, y);
                if !fits(rect) {
                    return Err(Error::Spec(format!(
                        "shot {shot_index} face {n}: its crop leaves the frame or overlaps another face"
                    )));
                }
                rect
            }
            (None, None) => {
                if size >= spec.width || size >= spec.height {
                    return Err(Error::Spec(format!(
                        "shot {shot_index} face {n}: size {size} does not fit"
                    )));
                }
                (0..PLACEMENT_ATTEMPTS)
                    .map(|_| {
                        square(
                            rng.random_range(0..=spec.width - size),
                            rng.random_range(0..=spec.height - size),
                        )
                    })
                    .find(|r| fits(*r))
                    .ok_or_else(|| {
                        Error::Spec(format!(
                            "shot {shot_index} face {n}: no free position found"
                        ))
                    })?
            }
            _ => {
                return Err(Error::Spec(format!(
                    "shot {shot_index} face {n}: give both x and y or neither"
                )))
            }
        };
        placed.push(PlantedFace {
            shot: shot_index,
            color: face.color,
            score: face.score,
            rect,
            expanded: expanded_box(rect, config.face_margin),
            frames,
        });
    }

    if spec.kind == MediaKind::Video {
        let bg = decoded(spec.kind, shot.background);
        let embeddings: Vec<[f64; 3]> = placed
            .iter()
            .map(|p| expected_embedding(decoded(spec.kind, p.color.rgb()), bg, p.rect, p.expanded))
            .collect();
        let t = config.cluster_sim_threshold;
        for i in 0..placed.len() {
            for j in i + 1..placed.len() {
                let sim: f64 = (0..3).map(|c| embeddings[i][c] * embeddings[j][c]).sum();
                let same = placed[i].color == placed[j].color;
                if same && sim <= t + SIMILARITY_MARGIN {
                    return Err(Error::Spec(format!(
                        "shot {shot_index}: two {} faces have similarity {sim:.3}, too low to cluster reliably",
                        placed[i].color
                    )));
                }
                if !same && sim >= t - SIMILARITY_MARGIN {
                    return Err(Error::Spec(format!(
                        "shot {shot_index}: {} and {} faces have similarity {sim:.3}, too close to the threshold {t}; \
                         use a darker background or other colours",
                        placed[i].color, placed[j].color
                    )));
                }
            }
        }
    }
    Ok(placed)
}

fn expected_report(
    spec: &FixtureSpec,
    config: &PipelineConfig,
    layouts: &[ShotLayout],
    lookup: &BTreeMap<MarkerColor, f64>,
    pipeline_version: &str,
) -> Result<ScoreReport> {
    let fps = spec.fps as f64;
    let mut shots = Vec::with_capacity(layouts.len());
    for (index, layout) in layouts.iter().enumerate() {
        let face_report = |p: &PlantedFace, frame: u64| FaceReport {
            timestamp: match spec.kind {
                MediaKind::Video => frame as f64 / fps,
                MediaKind::Image => 0.0,
            },
            bbox: p.expanded,
            score: lookup[&p.color],
        };
        let (sampled, clusters) = match spec.kind {
            MediaKind::Image => {
                let mut faces: Vec<&PlantedFace> = layout.faces.iter().collect();
                faces.sort_by_key(|p| (p.expanded.x0, p.expanded.y0));
                let clusters = faces
                    .into_iter()
                    .enumerate()
                    .map(|(id, p)| (id, vec![face_report(p, 0)]))
                    .collect::<Vec<_>>();
                (1, clusters)
            }
            MediaKind::Video => {
                let frames = spread(
                    layout.first_frame,
                    layout.end_frame,
                    config.max_frames_per_shot,
                );
                let mut groups: BTreeMap<MarkerColor, Vec<FaceReport>> = BTreeMap::new();
                for &f in &frames {
                    for p in layout
                        .faces
                        .iter()
                        .filter(|p| (p.frames[0]..p.frames[1]).contains(&f))
                    {
                        groups.entry(p.color).or_default().push(face_report(p, f));
                    }
                }
                let key =
                    |f: &FaceReport| (f.timestamp, f.bbox.x0, f.bbox.y0, f.bbox.x1, f.bbox.y1);
                let mut groups: Vec<Vec<FaceReport>> = groups.into_values().collect();
                for g in groups.iter_mut() {
                    g.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite timestamps"));
                }
                groups.sort_by(|a, b| {
                    key(&a[0])
                        .partial_cmp(&key(&b[0]))
                        .expect("finite timestamps")
                });
                let needed = config.cluster_min_frac * frames.len() as f64;
                let clusters = groups
                    .into_iter()
                    .enumerate()
                    .filter(|(_, g)| g.len() as f64 >= needed)
                    .collect::<Vec<_>>();
                (frames.len(), clusters)
            }
        };
        let clusters: Vec<ClusterReport> = clusters
            .into_iter()
            .map(|(cluster_id, faces)| ClusterReport {
                cluster_id,
                cluster_score: faces.iter().map(|f| f.score).sum::<f64>() / faces.len() as f64,
                faces,
            })
            .collect();
        let shot_score = clusters
            .iter()
            .map(|c| c.cluster_score)
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.max(s)))
            });
        shots.push(ShotReport {
            index,
            start: layout.start,
            end: layout.end,
            sampled_frames: sampled,
            shot_score,
            clusters,
            gallery_ref: None,
        });
    }
    let overall = shots
        .iter()
        .filter_map(|s| s.shot_score)
        .fold(None, |acc: Option<f64>, s| {
            Some(acc.map_or(s, |a| a.max(s)))
        });
    Ok(ScoreReport {
        media_kind: spec.kind,
        overall,
        no_faces_detected: overall.is_none(),
        shots,
        pipeline_version: pipeline_version.to_string(),
    })
}

fn paint(layout: &ShotLayout, width: u32, height: u32, frame: u64) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb(layout.background));
    for p in layout
        .faces
        .iter()
        .filter(|p| (p.frames[0]..p.frames[1]).contains(&frame))
    {
        for y in p.rect.y0..p.rect.y1 {
            for x in p.rect.x0..p.rect.x1 {
                img.put_pixel(x as u32, y as u32, Rgb(p.color.rgb()));
            }
        }
    }
    img
}

fn render(spec: &FixtureSpec, layouts: &[ShotLayout], total_frames: u64) -> Result<Vec<u8>> {
    match spec.kind {
        MediaKind::Image => {
            let img = paint(&layouts[0], spec.width, spec.height, 0);
            let mut out = Vec::new();
            image::codecs::png::PngEncoder::new(&mut out)
                .write_image(
                    img.as_raw(),
                    img.width(),
                    img.height(),
                    image::ExtendedColorType::Rgb8,
                )
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            Ok(out)
        }
        MediaKind::Video => {
            let frames: Vec<RgbImage> = (0..total_frames)
                .map(|f| {
                    let layout = layouts
                        .iter()
                        .find(|l| (l.first_frame..l.end_frame).contains(&f))
                        .expect("frames tile the shots");
                    paint(layout, spec.width, spec.height, f)
                })
                .collect();
            encode_y4m(spec.width, spec.height, spec.fps, &frames)
        }
    }
}

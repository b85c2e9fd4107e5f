//! Shot segmentation.
//!
//! Frames are sampled at a fixed rate, each frame is summarized by a set of
//! unit-norm region descriptors, consecutive frames are compared with
//! symmetrized Chamfer similarity and shot transitions are placed at peaks of
//! the resulting distance series.

use std::io::Write;

use crate::domain::{FrameSample, MediaKind, PipelineConfig, RegionDescriptorSet, Shot};
use crate::error::{Error, Result};
use crate::media::Media;

/// Lower bound of the adaptive peak threshold.
pub const MIN_ADAPTIVE_PEAK_THRESHOLD: f64 = 0.3;

/// Produces region descriptors for a frame. Implementations must be
/// deterministic and callable from several threads at once.
pub trait RegionDescriptorExtractor: Send + Sync {
    fn descriptor_dimension(&self) -> usize;
    fn extract(&self, frame: &FrameSample) -> Result<RegionDescriptorSet>;
}

/// Per-cell colour histograms on a 3×3 grid.
///
/// Each cell yields an 8-bin-per-channel RGB histogram (24 dimensions),
/// L2-normalized; the nine cell vectors form the descriptor set.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridHistogramExtractor;

impl GridHistogramExtractor {
    pub const GRID: u32 = 3;
    pub const BINS: usize = 8;
}

impl RegionDescriptorExtractor for GridHistogramExtractor {
    fn descriptor_dimension(&self) -> usize {
        3 * Self::BINS
    }

    fn extract(&self, frame: &FrameSample) -> Result<RegionDescriptorSet> {
        let img = &frame.pixels;
        let (w, h) = img.dimensions();
        if w < Self::GRID || h < Self::GRID {
            return Err(Error::Extractor(format!(
                "frame {w}x{h} is smaller than the {0}x{0} grid",
                Self::GRID
            )));
        }
        let mut cells = Vec::with_capacity((Self::GRID * Self::GRID) as usize);
        for gy in 0..Self::GRID {
            let (y0, y1) = (gy * h / Self::GRID, (gy + 1) * h / Self::GRID);
            for gx in 0..Self::GRID {
                let (x0, x1) = (gx * w / Self::GRID, (gx + 1) * w / Self::GRID);
                let mut hist = vec![0.0f64; 3 * Self::BINS];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = img.get_pixel(x, y).0;
                        for (c, v) in px.iter().enumerate() {
                            hist[c * Self::BINS + (*v as usize * Self::BINS / 256)] += 1.0;
                        }
                    }
                }
                let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
                hist.iter_mut().for_each(|v| *v /= norm);
                cells.push(hist);
            }
        }
        RegionDescriptorSet::new(frame.timestamp, cells)
    }
}

/// Distances between consecutive segmentation frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSeries {
    pub timestamps: Vec<f64>,
    /// `distances[i]` compares frame `i` with frame `i + 1`.
    pub distances: Vec<f64>,
    /// Length of the underlying video in seconds.
    pub duration: f64,
}

impl DistanceSeries {
    /// `max(0.3, mean + 2·stddev)` of the distances (population stddev).
    pub fn adaptive_threshold(&self) -> f64 {
        let n = self.distances.len();
        if n == 0 {
            return MIN_ADAPTIVE_PEAK_THRESHOLD;
        }
        let mean = self.distances.iter().sum::<f64>() / n as f64;
        let var = self
            .distances
            .iter()
            .map(|d| (d - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        (mean + 2.0 * var.sqrt()).max(MIN_ADAPTIVE_PEAK_THRESHOLD)
    }

    /// Writes `timestamp,distance` rows, stamping each distance with the
    /// timestamp of its later frame.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "distance"])
            .map_err(|e| Error::Io(e.into()))?;
        for (i, d) in self.distances.iter().enumerate() {
            w.write_record([self.timestamps[i + 1].to_string(), d.to_string()])
                .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Timestamps `0, 1/rate, 2/rate, …` strictly before `duration`, always at
/// least one.
pub fn segmentation_timestamps(duration: f64, rate: f64) -> Vec<f64> {
    let count = ((duration * rate - 1e-9).ceil().max(1.0)) as usize;
    (0..count).map(|k| k as f64 / rate).collect()
}

/// Samples frames from a video at `rate` frames per second.
pub fn extract_segmentation_frames(media: &Media, rate: f64) -> Result<Vec<FrameSample>> {
    if media.kind() != MediaKind::Video {
        return Err(Error::Precondition(
            "segmentation requires video input".into(),
        ));
    }
    if rate.is_nan() || rate <= 0.0 {
        return Err(Error::Precondition(format!(
            "sampling rate must be positive, got {rate}"
        )));
    }
    segmentation_timestamps(media.resource().duration(), rate)
        .into_iter()
        .map(|t| media.frame_at(t))
        .collect()
}

/// Symmetrized Chamfer similarity: the mean of the two directional averages
/// of best-match inner products. Identical descriptors count as exactly 1 and
/// products are clamped to `[-1, 1]`, so `CS(A, A) == 1` holds without
/// rounding error.
pub fn chamfer_similarity(a: &RegionDescriptorSet, b: &RegionDescriptorSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Invariant(format!(
            "descriptor dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.len(), b.len());
    // similarity matrix, row-major over a
    let mut sim = Vec::with_capacity(na * nb);
    for va in a.iter() {
        for vb in b.iter() {
            let s = if va == vb {
                1.0
            } else {
                va.iter()
                    .zip(vb)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            };
            sim.push(s);
        }
    }
    let mut row_best = 0.0;
    for i in 0..na {
        row_best += sim[i * nb..(i + 1) * nb]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let mut col_best = 0.0;
    for j in 0..nb {
        col_best += (0..na)
            .map(|i| sim[i * nb + j])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    // float addition commutes exactly, so CS(A,B) == CS(B,A) bitwise
    Ok(0.5 * (row_best / na as f64 + col_best / nb as f64))
}

pub fn build_distance_series(
    frames: &[FrameSample],
    extractor: &dyn RegionDescriptorExtractor,
    duration: f64,
) -> Result<DistanceSeries> {
    if frames.is_empty() {
        return Err(Error::Precondition(
            "distance series needs at least one frame".into(),
        ));
    }
    let descriptors = frames
        .iter()
        .map(|f| extractor.extract(f))
        .collect::<Result<Vec<_>>>()?;
    let distances = descriptors
        .windows(2)
        .map(|w| chamfer_similarity(&w[0], &w[1]).map(|s| 1.0 - s))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceSeries {
        timestamps: frames.iter().map(|f| f.timestamp).collect(),
        distances,
        duration,
    })
}

/// Places shot transitions at qualifying peaks of the distance series.
///
/// A boundary follows frame `i` when `distances[i]` is a strict local maximum
/// (missing neighbours count as −∞) and at least `peak_threshold`. Peaks are
/// accepted strongest first (earlier on ties) unless they fall within
/// `min_shot_len` of time zero or of an accepted boundary. A final shot shorter
/// than `min_shot_len` is merged into its predecessor.
pub fn detect_shot_boundaries(
    series: &DistanceSeries,
    min_shot_len: f64,
    peak_threshold: f64,
) -> Vec<Shot> {
    let d = &series.distances;
    let mut peaks: Vec<usize> = (0..d.len())
        .filter(|&i| {
            let left = if i > 0 { d[i - 1] } else { f64::NEG_INFINITY };
            let right = d.get(i + 1).copied().unwrap_or(f64::NEG_INFINITY);
            d[i] > left && d[i] > right && d[i] >= peak_threshold
        })
        .collect();
    // stable sort keeps earlier peaks first among equal distances
    peaks.sort_by(|&a, &b| d[b].total_cmp(&d[a]));

    let mut accepted: Vec<f64> = Vec::new();
    for i in peaks {
        let t = series.timestamps[i + 1];
        if t < min_shot_len {
            continue;
        }
        if accepted.iter().any(|&b| (t - b).abs() < min_shot_len) {
            continue;
        }
        accepted.push(t);
    }
    accepted.retain(|&b| series.duration - b >= min_shot_len);
    accepted.sort_by(f64::total_cmp);

    let mut edges = Vec::with_capacity(accepted.len() + 2);
    edges.push(0.0);
    edges.extend(accepted);
    edges.push(series.duration);
    edges
        .windows(2)
        .enumerate()
        .map(|(index, w)| Shot {
            index,
            start: w[0],
            end: w[1],
            frame_timestamps: series
                .timestamps
                .iter()
                .copied()
                .filter(|&t| t >= w[0] && t < w[1])
                .collect(),
        })
        .collect()
}

/// Segments a video into shots, returning the distance series alongside.
pub fn segment_video_with_series(
    media: &Media,
    extractor: &dyn RegionDescriptorExtractor,
    config: &PipelineConfig,
) -> Result<(Vec<Shot>, DistanceSeries)> {
    let frames = extract_segmentation_frames(media, config.segmentation_rate)?;
    let series = build_distance_series(&frames, extractor, media.resource().duration())?;
    let threshold = config
        .peak_threshold
        .unwrap_or_else(|| series.adaptive_threshold());
    let shots = detect_shot_boundaries(&series, config.min_shot_len, threshold);
    Ok((shots, series))
}

pub fn segment_video(
    media: &Media,
    extractor: &dyn RegionDescriptorExtractor,
    config: &PipelineConfig,
) -> Result<Vec<Shot>> {
    segment_video_with_series(media, extractor, config).map(|(shots, _)| shots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::encode_y4m;
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn set(vs: Vec<Vec<f64>>) -> RegionDescriptorSet {
        RegionDescriptorSet::new(0.0, vs).unwrap()
    }

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn series(distances: &[f64]) -> DistanceSeries {
        let n = distances.len() + 1;
        DistanceSeries {
            timestamps: (0..n).map(|i| i as f64).collect(),
            distances: distances.to_vec(),
            duration: n as f64,
        }
    }

    fn frame(color: [u8; 3], t: f64) -> FrameSample {
        FrameSample {
            index: 0,
            timestamp: t,
            pixels: Arc::new(RgbImage::from_pixel(12, 12, Rgb(color))),
        }
    }

    fn video(secs: &[(f64, [u8; 3])], fps: u32) -> Media {
        let mut frames = Vec::new();
        for (len, color) in secs {
            let n = (len * fps as f64).round() as usize;
            frames.extend(std::iter::repeat_n(
                RgbImage::from_pixel(24, 18, Rgb(*color)),
                n,
            ));
        }
        Media::from_bytes(
            encode_y4m(24, 18, fps, frames.iter()).unwrap(),
            "mem://v",
            "v",
        )
        .unwrap()
    }

    #[test]
    fn timestamp_enumeration() {
        assert_eq!(
            segmentation_timestamps(10.0, 1.0),
            (0..10).map(f64::from).collect::<Vec<_>>()
        );
        assert_eq!(segmentation_timestamps(0.5, 1.0), vec![0.0]);
        let t = segmentation_timestamps(9.5, 1.0);
        assert_eq!(t.len(), 10);
        assert_eq!(*t.last().unwrap(), 9.0);
    }

    #[test]
    fn extracts_frames_from_video() {
        let v = video(&[(9.5, [60, 60, 60])], 10);
        let frames = extract_segmentation_frames(&v, 1.0).unwrap();
        assert_eq!(frames.len(), 10);
        assert_eq!(frames[9].timestamp, 9.0);
        assert_eq!(frames[9].index, 90);
        let short = video(&[(0.5, [60, 60, 60])], 10);
        assert_eq!(extract_segmentation_frames(&short, 1.0).unwrap().len(), 1);
    }

    #[test]
    fn chamfer_worked_examples() {
        let a = set(vec![e(0, 3), e(1, 3)]);
        assert_eq!(chamfer_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(chamfer_similarity(&a, &set(vec![e(2, 3)])).unwrap(), 0.0);
        assert!((chamfer_similarity(&a, &set(vec![e(0, 3)])).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn chamfer_dimension_mismatch() {
        let a = set(vec![e(0, 3)]);
        let b = set(vec![e(0, 4)]);
        assert!(matches!(
            chamfer_similarity(&a, &b),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn distance_series_examples() {
        let x = GridHistogramExtractor;
        let one = build_distance_series(&[frame([10, 10, 10], 0.0)], &x, 1.0).unwrap();
        assert!(one.distances.is_empty());
        let two = build_distance_series(
            &[frame([10, 10, 10], 0.0), frame([10, 10, 10], 1.0)],
            &x,
            2.0,
        )
        .unwrap();
        assert_eq!(two.distances, vec![0.0]);
        let three = build_distance_series(
            &[
                frame([40, 40, 40], 0.0),
                frame([200, 30, 150], 1.0),
                frame([40, 40, 40], 2.0),
            ],
            &x,
            3.0,
        )
        .unwrap();
        // solid frames with no shared histogram bin are orthogonal in every cell
        assert_eq!(three.distances, vec![1.0, 1.0]);
    }

    #[test]
    fn boundary_examples() {
        let flat = series(&[0.1; 5]);
        let shots = detect_shot_boundaries(&flat, 1.5, 0.5);
        assert_eq!(shots.len(), 1);
        assert_eq!((shots[0].start, shots[0].end), (0.0, 6.0));

        let single = detect_shot_boundaries(&series(&[0.1, 0.1, 0.9, 0.1, 0.1]), 1.5, 0.5);
        let iv: Vec<_> = single.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(iv, vec![(0.0, 3.0), (3.0, 6.0)]);
        assert_eq!(single[0].frame_timestamps, vec![0.0, 1.0, 2.0]);

        let shoulder = detect_shot_boundaries(&series(&[0.1, 0.8, 0.9, 0.1]), 1.5, 0.5);
        let iv: Vec<_> = shoulder.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(iv, vec![(0.0, 3.0), (3.0, 5.0)]);
    }

    #[test]
    fn close_peaks_keep_the_stronger() {
        // peaks at i=2 (t=3) and i=4 (t=5), 2 s apart with min 2.5
        let s = series(&[0.0, 0.1, 0.7, 0.1, 0.9, 0.1, 0.0, 0.0, 0.0]);
        let shots = detect_shot_boundaries(&s, 2.5, 0.5);
        let starts: Vec<_> = shots.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0.0, 5.0]);
        // equal heights: the earlier wins
        let s = series(&[0.0, 0.1, 0.9, 0.1, 0.9, 0.1, 0.0, 0.0, 0.0]);
        let starts: Vec<_> = detect_shot_boundaries(&s, 2.5, 0.5)
            .iter()
            .map(|s| s.start)
            .collect();
        assert_eq!(starts, vec![0.0, 3.0]);
    }

    #[test]
    fn short_tail_is_merged() {
        // peak right before the end: t=5 with duration 6 leaves a 1 s tail
        let s = series(&[0.0, 0.0, 0.0, 0.0, 0.9]);
        let shots = detect_shot_boundaries(&s, 1.5, 0.5);
        assert_eq!(shots.len(), 1);
        assert_eq!(shots[0].end, 6.0);
    }

    #[test]
    fn adaptive_threshold_has_floor() {
        assert_eq!(series(&[0.0; 6]).adaptive_threshold(), 0.3);
        assert_eq!(series(&[]).adaptive_threshold(), 0.3);
        let t = series(&[0.0, 0.0, 1.0, 0.0]).adaptive_threshold();
        let expected = 0.25 + 2.0 * (0.1875f64).sqrt();
        assert!((t - expected).abs() < 1e-12);
    }

    #[test]
    fn segments_video() {
        let cfg = PipelineConfig::default();
        let x = GridHistogramExtractor;
        let single = segment_video(&video(&[(2.0, [80, 80, 80])], 10), &x, &cfg).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!((single[0].start, single[0].end), (0.0, 2.0));

        let three = segment_video(
            &video(
                &[
                    (4.0, [48, 48, 48]),
                    (5.0, [112, 176, 80]),
                    (6.0, [208, 80, 144]),
                ],
                10,
            ),
            &x,
            &cfg,
        )
        .unwrap();
        let iv: Vec<_> = three.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(iv, vec![(0.0, 4.0), (4.0, 9.0), (9.0, 15.0)]);
    }

    #[test]
    fn image_is_rejected() {
        let media = Media::from_image(RgbImage::new(4, 4), "mem://i");
        let err = segment_video(&media, &GridHistogramExtractor, &PipelineConfig::default());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn csv_output() {
        let mut buf = Vec::new();
        series(&[0.25, 0.5]).write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "timestamp,distance\n1,0.25\n2,0.5\n"
        );
    }

    fn check_tiling(
        shots: &[Shot],
        duration: f64,
        min_len: f64,
    ) -> std::result::Result<(), TestCaseError> {
        prop_assert!(!shots.is_empty());
        prop_assert_eq!(shots[0].start, 0.0);
        prop_assert_eq!(shots.last().unwrap().end, duration);
        for w in shots.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        for s in shots {
            prop_assert!(s.end > s.start);
            if shots.len() > 1 {
                prop_assert!(s.duration() >= min_len - 1e-12, "short shot {:?}", s);
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn shots_tile_and_respect_min_length(
            d in prop::collection::vec(0.0f64..2.0, 0..40),
            min_len in 0.5f64..4.0,
            thr in 0.05f64..1.5,
        ) {
            let s = series(&d);
            let shots = detect_shot_boundaries(&s, min_len, thr);
            check_tiling(&shots, s.duration, min_len)?;
        }

        #[test]
        fn raising_threshold_never_adds_shots(
            d in prop::collection::vec(0.0f64..2.0, 0..40),
            min_len in 0.5f64..4.0,
            lo in 0.05f64..1.0,
            delta in 0.0f64..1.0,
        ) {
            let s = series(&d);
            let a = detect_shot_boundaries(&s, min_len, lo).len();
            let b = detect_shot_boundaries(&s, min_len, lo + delta).len();
            prop_assert!(b <= a);
        }
    }
}

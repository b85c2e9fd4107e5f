//! Face tensor preprocessing and ensemble scoring.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::Engine;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::ChannelStats;
use crate::error::{Error, Result};
use crate::palette::MarkerColor;

/// Channel-major `(3, side, side)` normalized face tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTensor {
    side: usize,
    data: Vec<f32>,
}

impl FaceTensor {
    pub fn from_parts(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != 3 * side * side {
            return Err(Error::Invariant(format!(
                "tensor of {} values does not have shape (3, {side}, {side})",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("tensor contains non-finite values".into()));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.side, self.side]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.side + y) * self.side + x]
    }
}

/// Bilinear resample of one 8-bit channel to `[0, 1]` floats with
/// half-pixel centres. A same-size resample is the identity.
fn resize_channel(img: &RgbImage, channel: usize, side: usize, out: &mut [f32]) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let sample = |x: usize, y: usize| raw[(y * w + x) * 3 + channel] as f32 / 255.0;
    let axis = |dst: usize, src_len: usize| -> (usize, usize, f32) {
        let pos = ((dst as f32 + 0.5) * src_len as f32 / side as f32 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f32)
    };
    let cols: Vec<_> = (0..side).map(|x| axis(x, w)).collect();
    for y in 0..side {
        let (y0, y1, fy) = axis(y, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = sample(x0, y0) * (1.0 - fx) + sample(x1, y0) * fx;
            let bottom = sample(x0, y1) * (1.0 - fx) + sample(x1, y1) * fx;
            out[y * side + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

/// Resizes the crop to `input_side`², scales to `[0, 1]` and applies
/// `(x − mean) / std` per channel.
pub fn preprocess_face(
    crop: &RgbImage,
    input_side: u32,
    stats: &ChannelStats,
) -> Result<FaceTensor> {
    if crop.width() == 0 || crop.height() == 0 {
        return Err(Error::Invariant(
            "cannot preprocess a zero-area crop".into(),
        ));
    }
    let side = input_side as usize;
    if side == 0 {
        return Err(Error::Precondition("input side must be positive".into()));
    }
    let mut data = vec![0f32; 3 * side * side];
    for (c, plane) in data.chunks_exact_mut(side * side).enumerate() {
        resize_channel(crop, c, side, plane);
        let (m, s) = (stats.mean[c], stats.std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    FaceTensor::from_parts(side, data)
}

/// Undoes the channel normalization, returning values in `[0, 255]` units.
pub fn denormalize_pixel(t: &FaceTensor, y: usize, x: usize, stats: &ChannelStats) -> [f32; 3] {
    [0, 1, 2].map(|c| (t.at(c, y, x) * stats.std[c] + stats.mean[c]) * 255.0)
}

/// One model of the ensemble. Must return one probability per input tensor.
pub trait ScorerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn score_batch(&self, batch: &[FaceTensor]) -> Result<Vec<f64>>;
}

/// Returns the same probability for every face.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    name: String,
    value: f64,
}

impl ConstantBackend {
    pub fn new(name: impl Into<String>, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Spec(format!(
                "constant score {value} outside [0, 1]"
            )));
        }
        Ok(Self {
            name: name.into(),
            value,
        })
    }
}

impl ScorerBackend for ConstantBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, batch: &[FaceTensor]) -> Result<Vec<f64>> {
        Ok(vec![self.value; batch.len()])
    }
}

/// Scores fixture faces by the marker colour at the centre of the tensor.
#[derive(Debug, Clone)]
pub struct LookupBackend {
    name: String,
    table: BTreeMap<MarkerColor, f64>,
    fallback: Option<f64>,
    stats: ChannelStats,
}

impl LookupBackend {
    pub fn new(
        name: impl Into<String>,
        table: BTreeMap<MarkerColor, f64>,
        fallback: Option<f64>,
        stats: ChannelStats,
    ) -> Result<Self> {
        for v in table.values().chain(fallback.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Spec(format!("lookup score {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            name: name.into(),
            table,
            fallback,
            stats,
        })
    }

    /// Mean colour of the central 3×3 patch, matched to the palette.
    pub fn marker_of(&self, t: &FaceTensor) -> Option<MarkerColor> {
        let c = t.side() / 2;
        let lo = c.saturating_sub(1);
        let hi = (c + 1).min(t.side() - 1);
        let mut acc = [0f32; 3];
        let mut n = 0.0;
        for y in lo..=hi {
            for x in lo..=hi {
                let px = denormalize_pixel(t, y, x, &self.stats);
                for k in 0..3 {
                    acc[k] += px[k];
                }
                n += 1.0;
            }
        }
        MarkerColor::classify_f32(acc.map(|v| v / n))
    }
}

impl ScorerBackend for LookupBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, batch: &[FaceTensor]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|t| {
                self.marker_of(t)
                    .and_then(|m| self.table.get(&m).copied())
                    .or(self.fallback)
                    .ok_or_else(|| Error::Backend {
                        backend: self.name.clone(),
                        message: "face colour not in lookup table".into(),
                    })
            })
            .collect()
    }
}

/// Scores faces with every backend, `batch_size` tensors per call, and
/// averages the probabilities per face. Backends run in parallel; the first
/// failing backend in list order is reported.
pub fn score_faces(
    tensors: &[FaceTensor],
    ensemble: &[Arc<dyn ScorerBackend>],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::Precondition(
            "ensemble must contain at least one backend".into(),
        ));
    }
    if tensors.is_empty() {
        return Ok(Vec::new());
    }
    let batch_size = batch_size.max(1);
    let per_backend: Vec<Result<Vec<f64>>> = ensemble
        .par_iter()
        .map(|backend| {
            let mut out = Vec::with_capacity(tensors.len());
            for chunk in tensors.chunks(batch_size) {
                let scores = backend.score_batch(chunk).map_err(|e| match e {
                    e @ Error::Backend { .. } => e,
                    other => Error::Backend {
                        backend: backend.name().to_string(),
                        message: other.to_string(),
                    },
                })?;
                if scores.len() != chunk.len() {
                    return Err(Error::Backend {
                        backend: backend.name().to_string(),
                        message: format!(
                            "returned {} scores for {} faces",
                            scores.len(),
                            chunk.len()
                        ),
                    });
                }
                if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                    return Err(Error::Backend {
                        backend: backend.name().to_string(),
                        message: format!("score {bad} outside [0, 1]"),
                    });
                }
                out.extend(scores);
            }
            Ok(out)
        })
        .collect();

    // running mean: exact when every backend agrees
    let mut means = vec![0.0f64; tensors.len()];
    for (k, result) in per_backend.into_iter().enumerate() {
        let k = (k + 1) as f64;
        for (mean, s) in means.iter_mut().zip(result?) {
            *mean += (s - *mean) / k;
        }
    }
    Ok(means)
}

/// Request body of the remote scorer protocol (`POST /v1/score`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// `[N, 3, S, S]`
    pub shape: [usize; 4],
    /// Base64 of little-endian `f32` values in row-major order.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
}

impl ScoreRequest {
    pub fn encode(batch: &[FaceTensor]) -> Result<Self> {
        let side = batch.first().map(FaceTensor::side).unwrap_or(0);
        if batch.iter().any(|t| t.side() != side) {
            return Err(Error::Invariant("batch mixes tensor sizes".into()));
        }
        let mut bytes = Vec::with_capacity(batch.len() * 3 * side * side * 4);
        for t in batch {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(Self {
            shape: [batch.len(), 3, side, side],
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    }

    pub fn decode(&self) -> Result<Vec<FaceTensor>> {
        let [n, c, h, w] = self.shape;
        if c != 3 || h != w {
            return Err(Error::Input(format!(
                "unsupported tensor shape {:?}",
                self.shape
            )));
        }
        let per = 3usize.checked_mul(h).and_then(|v| v.checked_mul(w));
        let needed = per
            .and_then(|p| p.checked_mul(n))
            .and_then(|v| v.checked_mul(4));
        let (Some(per), Some(needed)) = (per, needed) else {
            return Err(Error::Input(format!(
                "tensor shape {:?} is too large",
                self.shape
            )));
        };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Input(format!("tensor data is not base64: {e}")))?;
        if bytes.len() != needed {
            return Err(Error::Input(format!(
                "tensor data has {} bytes, shape {:?} needs {needed}",
                bytes.len(),
                self.shape
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        floats
            .chunks_exact(per.max(1))
            .take(n)
            .map(|chunk| FaceTensor::from_parts(h, chunk.to_vec()))
            .collect()
    }
}

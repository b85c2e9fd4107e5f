//! Media decoding.
//!
//! Images are anything the `image` crate recognizes from magic bytes (PNG,
//! JPEG). Video is read from YUV4MPEG2 (`.y4m`) streams, the uncompressed
//! format most encoders can emit (`ffmpeg -i in.mp4 -pix_fmt yuv420p out.y4m`).
//! Frames are indexed once and decoded to RGB on demand, using BT.601
//! limited-range coefficients.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;

use crate::domain::{FrameSample, MediaKind, MediaResource};
use crate::error::{Error, Result};

const Y4M_MAGIC: &[u8] = b"YUV4MPEG2 ";
const FRAME_TAG: &[u8] = b"FRAME";

/// Media kind from content magic bytes. File extensions are never consulted.
pub fn sniff_kind(bytes: &[u8]) -> Option<MediaKind> {
    if bytes.starts_with(Y4M_MAGIC) {
        return Some(MediaKind::Video);
    }
    image::guess_format(bytes).ok().map(|_| MediaKind::Image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chroma {
    C420,
    C422,
    C444,
    Mono,
}

impl Chroma {
    fn plane_dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            Chroma::C420 => (width.div_ceil(2), height.div_ceil(2)),
            Chroma::C422 => (width.div_ceil(2), height),
            Chroma::C444 => (width, height),
            Chroma::Mono => (0, 0),
        }
    }
}

/// An indexed Y4M stream.
#[derive(Debug)]
pub struct Y4mVideo {
    width: usize,
    height: usize,
    fps: f64,
    chroma: Chroma,
    data: Vec<u8>,
    frames: Vec<usize>,
}

impl Y4mVideo {
    pub fn parse(data: Vec<u8>) -> Result<Self> {
        let bad = |msg: String| Error::MediaDecode {
            timestamp: 0.0,
            message: msg,
        };
        if !data.starts_with(Y4M_MAGIC) {
            return Err(bad("missing YUV4MPEG2 signature".into()));
        }
        let header_end = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated stream header".into()))?;
        let header = std::str::from_utf8(&data[Y4M_MAGIC.len()..header_end])
            .map_err(|_| bad("stream header is not ASCII".into()))?;

        let (mut width, mut height) = (0usize, 0usize);
        let mut fps = None;
        let mut chroma = Chroma::C420;
        // extra planes after Y/Cb/Cr (alpha in C444alpha)
        let mut trailing_planes = 0;
        for token in header.split_ascii_whitespace() {
            let (tag, value) = token.split_at(1);
            match tag {
                "W" => {
                    width = value
                        .parse()
                        .map_err(|_| bad(format!("bad width `{value}`")))?
                }
                "H" => {
                    height = value
                        .parse()
                        .map_err(|_| bad(format!("bad height `{value}`")))?
                }
                "F" => {
                    let (n, d) = value
                        .split_once(':')
                        .ok_or_else(|| bad(format!("bad frame rate `{value}`")))?;
                    let n: f64 = n
                        .parse()
                        .map_err(|_| bad(format!("bad frame rate `{value}`")))?;
                    let d: f64 = d
                        .parse()
                        .map_err(|_| bad(format!("bad frame rate `{value}`")))?;
                    if n <= 0.0 || d <= 0.0 {
                        return Err(bad(format!("bad frame rate `{value}`")));
                    }
                    fps = Some(n / d);
                }
                "C" => {
                    chroma = match value {
                        "420" | "420jpeg" | "420paldv" | "420mpeg2" => Chroma::C420,
                        "422" => Chroma::C422,
                        "444" => Chroma::C444,
                        "444alpha" => {
                            trailing_planes = 1;
                            Chroma::C444
                        }
                        "mono" => Chroma::Mono,
                        other => {
                            return Err(Error::UnsupportedMedia(format!(
                                "Y4M colorspace C{other} (only 8-bit 420/422/444/mono)"
                            )))
                        }
                    }
                }
                _ => {}
            }
        }
        if width == 0 || height == 0 {
            return Err(bad("missing frame dimensions".into()));
        }
        let fps = fps.ok_or_else(|| bad("missing frame rate".into()))?;

        let (cw, ch) = chroma.plane_dims(width, height);
        let frame_len = width * height * (1 + trailing_planes) + 2 * cw * ch;
        let mut frames = Vec::new();
        let mut pos = header_end + 1;
        while pos < data.len() {
            if !data[pos..].starts_with(FRAME_TAG) {
                return Err(Error::MediaDecode {
                    timestamp: frames.len() as f64 / fps,
                    message: format!("expected FRAME marker at byte {pos}"),
                });
            }
            let line_end = data[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| pos + p)
                .ok_or_else(|| Error::MediaDecode {
                    timestamp: frames.len() as f64 / fps,
                    message: "unterminated FRAME header".into(),
                })?;
            let start = line_end + 1;
            if start + frame_len > data.len() {
                // truncated trailing frame; keep what decodes completely
                tracing::warn!(
                    frame = frames.len(),
                    "dropping truncated trailing Y4M frame"
                );
                break;
            }
            frames.push(start);
            pos = start + frame_len;
        }
        if frames.is_empty() {
            return Err(bad("stream contains no frames".into()));
        }
        Ok(Self {
            width,
            height,
            fps,
            chroma,
            data,
            frames,
        })
    }

    pub fn width(&self) -> u32 {
        self.width as u32
    }

    pub fn height(&self) -> u32 {
        self.height as u32
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> u64 {
        self.frames.len() as u64
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn decode(&self, index: u64) -> Result<RgbImage> {
        let start = *self
            .frames
            .get(index as usize)
            .ok_or_else(|| Error::MediaDecode {
                timestamp: index as f64 / self.fps,
                message: format!("frame {index} out of range ({} frames)", self.frames.len()),
            })?;
        let (w, h) = (self.width, self.height);
        let (cw, ch) = self.chroma.plane_dims(w, h);
        let y_plane = &self.data[start..start + w * h];
        let cb_start = start + w * h;
        let cb_plane = &self.data[cb_start..cb_start + cw * ch];
        let cr_plane = &self.data[cb_start + cw * ch..cb_start + 2 * cw * ch];

        let mut out = RgbImage::new(w as u32, h as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            let luma = y_plane[y * w + x];
            let (cb, cr) = match self.chroma {
                Chroma::Mono => (128, 128),
                Chroma::C444 => (cb_plane[y * w + x], cr_plane[y * w + x]),
                Chroma::C422 => (cb_plane[y * cw + x / 2], cr_plane[y * cw + x / 2]),
                Chroma::C420 => {
                    let i = (y / 2) * cw + x / 2;
                    (cb_plane[i], cr_plane[i])
                }
            };
            px.0 = ycbcr_to_rgb(luma, cb, cr);
        }
        Ok(out)
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// BT.601 limited-range YCbCr to RGB.
pub fn ycbcr_to_rgb(y: u8, cb: u8, cr: u8) -> [u8; 3] {
    let y = 1.164_383_56 * (y as f64 - 16.0);
    let cb = cb as f64 - 128.0;
    let cr = cr as f64 - 128.0;
    [
        clamp_u8(y + 1.596_026_79 * cr),
        clamp_u8(y - 0.391_762_29 * cb - 0.812_967_65 * cr),
        clamp_u8(y + 2.017_232_14 * cb),
    ]
}

/// BT.601 limited-range RGB to YCbCr.
pub fn rgb_to_ycbcr([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    [
        clamp_u8(16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0),
        clamp_u8(128.0 + (-37.797 * r - 74.203 * g + 112.0 * b) / 255.0),
        clamp_u8(128.0 + (112.0 * r - 93.786 * g - 18.214 * b) / 255.0),
    ]
}

/// Writes RGB frames as a 4:4:4 Y4M stream. `fps` is expressed as the
/// rational `fps_num/1`.
pub fn encode_y4m<'a>(
    width: u32,
    height: u32,
    fps_num: u32,
    frames: impl IntoIterator<Item = &'a RgbImage>,
) -> Result<Vec<u8>> {
    let mut out = format!("YUV4MPEG2 W{width} H{height} F{fps_num}:1 Ip A1:1 C444\n").into_bytes();
    let plane = (width * height) as usize;
    let mut planes = vec![0u8; plane * 3];
    for frame in frames {
        if frame.dimensions() != (width, height) {
            return Err(Error::Invariant(format!(
                "frame is {:?}, stream is {width}x{height}",
                frame.dimensions()
            )));
        }
        for (i, px) in frame.pixels().enumerate() {
            let [y, cb, cr] = rgb_to_ycbcr(px.0);
            planes[i] = y;
            planes[plane + i] = cb;
            planes[2 * plane + i] = cr;
        }
        out.extend_from_slice(b"FRAME\n");
        out.extend_from_slice(&planes);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum MediaData {
    Image(Arc<RgbImage>),
    Video(Arc<Y4mVideo>),
}

/// A decodable media resource.
#[derive(Debug, Clone)]
pub struct Media {
    resource: MediaResource,
    data: MediaData,
}

impl Media {
    /// Sniffs and indexes `bytes`.
    pub fn from_bytes(bytes: Vec<u8>, source_url: &str, local_ref: &str) -> Result<Self> {
        let kind = sniff_kind(&bytes).ok_or_else(|| {
            Error::UnsupportedMedia("content is neither a known image nor Y4M video".into())
        })?;
        let (resource, data) = match kind {
            MediaKind::Video => {
                let video = Y4mVideo::parse(bytes)?;
                let resource = MediaResource {
                    kind,
                    source_url: source_url.to_string(),
                    local_ref: local_ref.to_string(),
                    width: video.width(),
                    height: video.height(),
                    fps: Some(video.fps()),
                    duration: Some(video.duration()),
                    frame_count: Some(video.frame_count()),
                };
                (resource, MediaData::Video(Arc::new(video)))
            }
            MediaKind::Image => {
                let img = image::load_from_memory(&bytes)
                    .map_err(|e| Error::MediaDecode {
                        timestamp: 0.0,
                        message: e.to_string(),
                    })?
                    .to_rgb8();
                let resource = MediaResource {
                    kind,
                    source_url: source_url.to_string(),
                    local_ref: local_ref.to_string(),
                    width: img.width(),
                    height: img.height(),
                    fps: None,
                    duration: None,
                    frame_count: None,
                };
                (resource, MediaData::Image(Arc::new(img)))
            }
        };
        resource.validate()?;
        Ok(Self { resource, data })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let url = format!("file://{}", path.display());
        Self::from_bytes(bytes, &url, &path.display().to_string())
    }

    pub fn from_image(img: RgbImage, source_url: &str) -> Self {
        let resource = MediaResource {
            kind: MediaKind::Image,
            source_url: source_url.to_string(),
            local_ref: String::new(),
            width: img.width(),
            height: img.height(),
            fps: None,
            duration: None,
            frame_count: None,
        };
        Self {
            resource,
            data: MediaData::Image(Arc::new(img)),
        }
    }

    pub fn resource(&self) -> &MediaResource {
        &self.resource
    }

    pub fn kind(&self) -> MediaKind {
        self.resource.kind
    }

    /// Number of source frames (1 for images).
    pub fn frame_count(&self) -> u64 {
        self.resource.frame_count.unwrap_or(1)
    }

    /// Decodes source frame `index`.
    pub fn frame(&self, index: u64) -> Result<FrameSample> {
        match &self.data {
            MediaData::Image(img) if index == 0 => Ok(FrameSample {
                index: 0,
                timestamp: 0.0,
                pixels: Arc::clone(img),
            }),
            MediaData::Image(_) => Err(Error::MediaDecode {
                timestamp: 0.0,
                message: format!("image has no frame {index}"),
            }),
            MediaData::Video(v) => Ok(FrameSample {
                index,
                timestamp: index as f64 / v.fps(),
                pixels: Arc::new(v.decode(index)?),
            }),
        }
    }

    /// Index of the nearest source frame at or before `t` seconds.
    pub fn frame_index_at(&self, t: f64) -> u64 {
        let fps = self.resource.fps();
        if fps <= 0.0 {
            return 0;
        }
        let idx = (t * fps + 1e-9).floor().max(0.0) as u64;
        idx.min(self.frame_count().saturating_sub(1))
    }

    /// Decodes the frame shown at `t` and stamps it with `t`.
    pub fn frame_at(&self, t: f64) -> Result<FrameSample> {
        let mut frame = self.frame(self.frame_index_at(t)).map_err(|e| match e {
            Error::MediaDecode { message, .. } => Error::MediaDecode {
                timestamp: t,
                message,
            },
            other => other,
        })?;
        frame.timestamp = t;
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn color_conversion_round_trips_within_two_levels() {
        for r in (0..=255u16).step_by(17) {
            for g in (0..=255u16).step_by(51) {
                for b in (0..=255u16).step_by(85) {
                    let rgb = [r as u8, g as u8, b as u8];
                    let [y, cb, cr] = rgb_to_ycbcr(rgb);
                    let back = ycbcr_to_rgb(y, cb, cr);
                    for c in 0..3 {
                        assert!(
                            (back[c] as i32 - rgb[c] as i32).abs() <= 2,
                            "{rgb:?} -> {back:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn y4m_round_trip() {
        let a = RgbImage::from_pixel(8, 6, Rgb([255, 0, 0]));
        let b = RgbImage::from_pixel(8, 6, Rgb([48, 112, 176]));
        let bytes = encode_y4m(8, 6, 5, [&a, &b, &a]).unwrap();
        assert_eq!(sniff_kind(&bytes), Some(MediaKind::Video));
        let media = Media::from_bytes(bytes, "mem://v", "v").unwrap();
        let res = media.resource();
        assert_eq!((res.width, res.height, res.frame_count), (8, 6, Some(3)));
        assert!((res.duration.unwrap() - 0.6).abs() < 1e-12);
        let f1 = media.frame(1).unwrap();
        assert!((f1.timestamp - 0.2).abs() < 1e-12);
        let px = f1.pixels.get_pixel(3, 3).0;
        assert!(px
            .iter()
            .zip([48, 112, 176])
            .all(|(a, b)| (*a as i32 - b).abs() <= 2));
        assert!(media.frame(3).is_err());
    }

    #[test]
    fn parses_420_streams() {
        let (w, h) = (4usize, 2usize);
        let mut bytes = b"YUV4MPEG2 W4 H2 F25:1 C420jpeg\nFRAME\n".to_vec();
        bytes.extend(std::iter::repeat_n(126u8, w * h));
        bytes.extend(std::iter::repeat_n(128u8, 2 * 2));
        let media = Media::from_bytes(bytes, "mem://v", "v").unwrap();
        let f = media.frame(0).unwrap();
        assert_eq!(f.pixels.dimensions(), (4, 2));
        let px = f.pixels.get_pixel(0, 0).0;
        assert_eq!(px[0], px[1]);
    }

    #[test]
    fn frame_lookup_uses_frame_at_or_before() {
        let a = RgbImage::new(2, 2);
        let frames = vec![a; 25];
        let bytes = encode_y4m(2, 2, 10, frames.iter()).unwrap();
        let media = Media::from_bytes(bytes, "mem://v", "v").unwrap();
        assert_eq!(media.frame_index_at(0.0), 0);
        assert_eq!(media.frame_index_at(1.0), 10);
        assert_eq!(media.frame_index_at(1.09), 10);
        assert_eq!(media.frame_index_at(99.0), 24);
        assert_eq!(media.frame_at(2.0).unwrap().timestamp, 2.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Media::from_bytes(b"hello world".to_vec(), "x", "x"),
            Err(Error::UnsupportedMedia(_))
        ));
        assert!(Media::from_bytes(b"YUV4MPEG2 W2 H2\n".to_vec(), "x", "x").is_err());
        assert!(matches!(
            Media::from_bytes(b"YUV4MPEG2 W2 H2 F1:1 C420p10\n".to_vec(), "x", "x"),
            Err(Error::UnsupportedMedia(_))
        ));
    }

    #[test]
    fn decodes_png() {
        let img = RgbImage::from_pixel(5, 3, Rgb([1, 2, 3]));
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let media = Media::from_bytes(buf.into_inner(), "mem://i", "i").unwrap();
        assert_eq!(media.kind(), MediaKind::Image);
        assert_eq!(media.frame(0).unwrap().pixels.get_pixel(4, 2).0, [1, 2, 3]);
        assert_eq!(media.frame_count(), 1);
    }
}

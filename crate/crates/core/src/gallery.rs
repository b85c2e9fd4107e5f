//! Gallery plots: a grid of a shot's keyframes, each framed in a colour
//! running from green (score 0) to red (score 1).

use image::imageops::FilterType;
use image::{ImageEncoder, Rgb, RgbImage};

use crate::domain::{BoundingBox, FrameSample};
use crate::error::{Error, Result};

pub const BORDER_PX: u32 = 6;
pub const TILE_WIDTH: u32 = 160;
const BOX_STROKE: u32 = 2;

/// `(round(255·s), round(255·(1−s)), 0)`.
pub fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    [
        (255.0 * s).round() as u8,
        (255.0 * (1.0 - s)).round() as u8,
        0,
    ]
}

/// A keyframe reduced to tile size, with face boxes in tile coordinates.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub timestamp: f64,
    pub thumbnail: RgbImage,
    pub faces: Vec<(BoundingBox, f64)>,
}

impl Keyframe {
    /// Downscales `frame` to at most `tile_width` pixels wide and maps the
    /// face boxes accordingly.
    pub fn from_frame(frame: &FrameSample, faces: &[(BoundingBox, f64)], tile_width: u32) -> Self {
        let (w, h) = frame.pixels.dimensions();
        let scale = if w > tile_width {
            tile_width as f64 / w as f64
        } else {
            1.0
        };
        let (tw, th) = (
            ((w as f64 * scale).round() as u32).max(1),
            ((h as f64 * scale).round() as u32).max(1),
        );
        let thumbnail = if (tw, th) == (w, h) {
            (*frame.pixels).clone()
        } else {
            image::imageops::resize(&*frame.pixels, tw, th, FilterType::Triangle)
        };
        let map = |v: i64| (v as f64 * scale).round() as i64;
        Self {
            timestamp: frame.timestamp,
            thumbnail,
            faces: faces
                .iter()
                .map(|(b, s)| {
                    (
                        BoundingBox::new(map(b.x0), map(b.y0), map(b.x1), map(b.y1)),
                        *s,
                    )
                })
                .collect(),
        }
    }

    /// Frame score: the highest face score, 0 without faces.
    pub fn score(&self) -> f64 {
        self.faces.iter().map(|(_, s)| *s).fold(0.0, f64::max)
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    for y in y0.min(h)..y1.min(h) {
        for x in x0.min(w)..x1.min(w) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn outline(img: &mut RgbImage, b: BoundingBox, ox: u32, oy: u32, color: [u8; 3]) {
    let clamp = |v: i64| v.max(0) as u32;
    let (x0, y0, x1, y1) = (
        clamp(b.x0) + ox,
        clamp(b.y0) + oy,
        clamp(b.x1) + ox,
        clamp(b.y1) + oy,
    );
    let t = BOX_STROKE;
    fill(img, x0, y0, x1, (y0 + t).min(y1), color);
    fill(img, x0, y1.saturating_sub(t).max(y0), x1, y1, color);
    fill(img, x0, y0, (x0 + t).min(x1), y1, color);
    fill(img, x1.saturating_sub(t).max(x0), y0, x1, y1, color);
}

/// Lays keyframes out row-major on a grid of `⌈√n⌉` columns, each with a
/// border coloured by its score and face boxes outlined in their own score
/// colour.
pub fn render_gallery_image(keyframes: &[Keyframe]) -> Result<RgbImage> {
    if keyframes.is_empty() {
        return Err(Error::Precondition(
            "gallery needs at least one keyframe".into(),
        ));
    }
    let n = keyframes.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell_w = keyframes
        .iter()
        .map(|k| k.thumbnail.width())
        .max()
        .unwrap_or(1)
        + 2 * BORDER_PX;
    let cell_h = keyframes
        .iter()
        .map(|k| k.thumbnail.height())
        .max()
        .unwrap_or(1)
        + 2 * BORDER_PX;
    let mut canvas = RgbImage::new(cell_w * cols as u32, cell_h * rows as u32);
    for (i, kf) in keyframes.iter().enumerate() {
        let (cx, cy) = ((i % cols) as u32 * cell_w, (i / cols) as u32 * cell_h);
        let (tw, th) = kf.thumbnail.dimensions();
        fill(
            &mut canvas,
            cx,
            cy,
            cx + tw + 2 * BORDER_PX,
            cy + th + 2 * BORDER_PX,
            score_color(kf.score()),
        );
        let (ox, oy) = (cx + BORDER_PX, cy + BORDER_PX);
        image::imageops::replace(&mut canvas, &kf.thumbnail, ox as i64, oy as i64);
        for (b, s) in &kf.faces {
            outline(&mut canvas, *b, ox, oy, score_color(*s));
        }
    }
    Ok(canvas)
}

/// Renders the gallery and encodes it as PNG. Identical input gives
/// identical bytes.
pub fn render_gallery(keyframes: &[Keyframe]) -> Result<Vec<u8>> {
    let canvas = render_gallery_image(keyframes)?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(
            canvas.as_raw(),
            canvas.width(),
            canvas.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out)
}

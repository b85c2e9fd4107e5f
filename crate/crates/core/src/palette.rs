//! Reserved marker colours used by synthetic fixtures and the reference
//! detector/scorer.
//!
//! Marker colours only use channel values 0 and 255. Scene backgrounds are
//! kept inside [`BACKGROUND_RANGE`] so that no background pixel can be taken
//! for a marker.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Per-channel tolerance when matching a pixel to a marker colour.
pub const MATCH_TOLERANCE: u8 = 40;

/// Allowed per-channel range for background colours.
pub const BACKGROUND_RANGE: std::ops::RangeInclusive<u8> = 48..=207;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MarkerColor {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl MarkerColor {
    pub const ALL: [MarkerColor; 6] = [
        MarkerColor::Red,
        MarkerColor::Green,
        MarkerColor::Blue,
        MarkerColor::Yellow,
        MarkerColor::Cyan,
        MarkerColor::Magenta,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            MarkerColor::Red => [255, 0, 0],
            MarkerColor::Green => [0, 255, 0],
            MarkerColor::Blue => [0, 0, 255],
            MarkerColor::Yellow => [255, 255, 0],
            MarkerColor::Cyan => [0, 255, 255],
            MarkerColor::Magenta => [255, 0, 255],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarkerColor::Red => "red",
            MarkerColor::Green => "green",
            MarkerColor::Blue => "blue",
            MarkerColor::Yellow => "yellow",
            MarkerColor::Cyan => "cyan",
            MarkerColor::Magenta => "magenta",
        }
    }

    /// The marker whose colour is within [`MATCH_TOLERANCE`] of `px` on every
    /// channel, if any.
    pub fn classify(px: [u8; 3]) -> Option<MarkerColor> {
        Self::ALL.into_iter().find(|m| {
            m.rgb()
                .iter()
                .zip(px)
                .all(|(a, b)| a.abs_diff(b) <= MATCH_TOLERANCE)
        })
    }

    /// Same as [`classify`](Self::classify) for real-valued RGB in `[0, 255]`.
    pub fn classify_f32(px: [f32; 3]) -> Option<MarkerColor> {
        Self::ALL.into_iter().find(|m| {
            m.rgb()
                .iter()
                .zip(px)
                .all(|(a, b)| (*a as f32 - b).abs() <= MATCH_TOLERANCE as f32)
        })
    }
}

impl fmt::Display for MarkerColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarkerColor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Spec(format!(
                    "`{s}` is not a reserved marker colour (expected one of red, green, blue, yellow, cyan, magenta)"
                ))
            })
    }
}

impl Serialize for MarkerColor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MarkerColor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub fn is_valid_background(rgb: [u8; 3]) -> bool {
    rgb.iter().all(|c| BACKGROUND_RANGE.contains(c))
}

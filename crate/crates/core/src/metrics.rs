//! Balanced accuracy and ROC AUC over labelled scores.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub media_id: String,
    pub label: Label,
    pub score: f64,
}

impl EvalRecord {
    pub fn new(media_id: impl Into<String>, label: Label, score: f64) -> Self {
        Self {
            media_id: media_id.into(),
            label,
            score,
        }
    }
}

fn check(records: &[EvalRecord]) -> Result<(usize, usize)> {
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.score)) {
        return Err(Error::Input(format!(
            "score {} for {} outside [0, 1]",
            r.score, r.media_id
        )));
    }
    let fakes = records.iter().filter(|r| r.label == Label::Fake).count();
    let reals = records.len() - fakes;
    if reals == 0 || fakes == 0 {
        let missing = if reals == 0 { "real" } else { "fake" };
        return Err(Error::MetricUndefined(format!("no {missing} records")));
    }
    Ok((reals, fakes))
}

/// Mean per-class recall, as a percentage. A score at or above `threshold`
/// is a fake prediction.
pub fn balanced_accuracy(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Input(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (reals, fakes) = check(records)?;
    let true_real = records
        .iter()
        .filter(|r| r.label == Label::Real && r.score < threshold)
        .count();
    let true_fake = records
        .iter()
        .filter(|r| r.label == Label::Fake && r.score >= threshold)
        .count();
    let recall_real = true_real as f64 / reals as f64;
    let recall_fake = true_fake as f64 / fakes as f64;
    Ok(100.0 * (recall_real + recall_fake) / 2.0)
}

/// Area under the ROC curve via the rank-sum statistic, ties counting ½.
/// Runs in O(n log n).
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let (reals, fakes) = check(records)?;
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    // sum of doubled midranks of the fakes keeps everything in integers
    let mut fake_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1..=j, doubled midrank = i + 1 + j
        let mid2 = (i + 1 + j) as u128;
        let tied_fakes = sorted[i..j]
            .iter()
            .filter(|r| r.label == Label::Fake)
            .count() as u128;
        fake_rank_sum2 += mid2 * tied_fakes;
        i = j;
    }
    let (m, n) = (fakes as u128, reals as u128);
    // U = R_fake - m(m+1)/2, doubled
    let u2 = fake_rank_sum2 - m * (m + 1);
    Ok(u2 as f64 / (2 * m * n) as f64)
}

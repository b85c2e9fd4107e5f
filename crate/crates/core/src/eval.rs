//! Dataset evaluation: run the pipeline over a labelled manifest and report
//! BA and AUC for the whole set and for each manipulation tag.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::ScoreReport;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub media: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct CsvRow {
    media: String,
    label: String,
    #[serde(default)]
    manipulation: Option<String>,
}

fn is_url(s: &str) -> bool {
    s.contains("://")
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("manifest has no entries".into()));
        }
        Ok(Self {
            name: name.into(),
            entries,
        })
    }

    /// Parses `media,label[,manipulation]` CSV with a header row.
    pub fn from_csv(name: impl Into<String>, reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::Input(format!("manifest row {}: {e}", i + 2)))?;
            entries.push(ManifestEntry {
                media: row.media,
                label: row.label.parse()?,
                manipulation: row.manipulation.filter(|m| !m.is_empty()),
            });
        }
        Self::new(name, entries)
    }

    /// Reads a manifest file; relative media paths are resolved against the
    /// manifest's directory. The manifest name is the file stem.
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut manifest = Self::from_csv(name, file)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut manifest.entries {
            if !is_url(&e.media) && Path::new(&e.media).is_relative() {
                e.media = base.join(&e.media).to_string_lossy().into_owned();
            }
        }
        Ok(manifest)
    }

    /// Distinct manipulation tags in first-seen order.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for t in self.entries.iter().filter_map(|e| e.manipulation.as_ref()) {
            if !tags.contains(t) {
                tags.push(t.clone());
            }
        }
        tags
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<String>,
    pub n_real: usize,
    pub n_fake: usize,
    /// Percentage.
    pub balanced_accuracy: f64,
    pub auc: f64,
}

impl MetricsRow {
    pub fn compute(
        dataset: &str,
        manipulation: Option<&str>,
        records: &[EvalRecord],
        threshold: f64,
    ) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            manipulation: manipulation.map(str::to_string),
            n_real: records.iter().filter(|r| r.label == Label::Real).count(),
            n_fake: records.iter().filter(|r| r.label == Label::Fake).count(),
            balanced_accuracy: metrics::balanced_accuracy(records, threshold)?,
            auc: metrics::auc(records)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryFailure {
    pub media: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    /// Whole-manifest row first, then one row per manipulation tag.
    pub rows: Vec<MetricsRow>,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<EntryFailure>,
    pub warnings: Vec<String>,
}

/// Scores every entry with `analyze` (concurrently) and computes metrics.
///
/// A report without faces counts as score 0. Entries that fail are left out
/// and listed in `failures`. Each tag row covers the entries with that tag
/// plus every untagged real entry, so a manifest of shared originals and
/// per-manipulation fakes yields one meaningful row per manipulation.
pub fn evaluate_manifest<F>(
    manifest: &DatasetManifest,
    threshold: f64,
    analyze: F,
) -> Result<EvalOutcome>
where
    F: Fn(&str) -> Result<ScoreReport> + Sync,
{
    let results: Vec<(usize, Result<ScoreReport>)> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| (i, analyze(&e.media)))
        .collect();

    let mut records = Vec::new();
    let mut tagged: Vec<Option<&str>> = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (i, result) in results {
        let entry = &manifest.entries[i];
        match result {
            Ok(report) => {
                let score = match report.overall {
                    Some(s) => s,
                    None => {
                        warnings.push(format!("{}: no faces detected, scored as 0", entry.media));
                        0.0
                    }
                };
                records.push(EvalRecord::new(entry.media.clone(), entry.label, score));
                tagged.push(entry.manipulation.as_deref());
            }
            Err(e) => failures.push(EntryFailure {
                media: entry.media.clone(),
                message: e.to_string(),
            }),
        }
    }

    let mut rows = vec![MetricsRow::compute(
        &manifest.name,
        None,
        &records,
        threshold,
    )?];
    for tag in manifest.tags() {
        let subset: Vec<EvalRecord> = records
            .iter()
            .zip(&tagged)
            .filter(|(r, t)| **t == Some(tag.as_str()) || (t.is_none() && r.label == Label::Real))
            .map(|(r, _)| r.clone())
            .collect();
        match MetricsRow::compute(&manifest.name, Some(&tag), &subset, threshold) {
            Ok(row) => rows.push(row),
            Err(e) => warnings.push(format!("{tag}: {e}")),
        }
    }
    Ok(EvalOutcome {
        rows,
        records,
        failures,
        warnings,
    })
}

/// Writes rows as CSV with a header.
pub fn write_rows_csv(rows: &[MetricsRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset",
        "manipulation",
        "n_real",
        "n_fake",
        "balanced_accuracy",
        "auc",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.manipulation.clone().unwrap_or_default(),
            r.n_real.to_string(),
            r.n_fake.to_string(),
            format!("{:.4}", r.balanced_accuracy),
            format!("{:.6}", r.auc),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows in the [`write_rows_csv`] layout; an empty manipulation
/// column is the whole-dataset row.
pub fn read_rows_csv(input: impl std::io::Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    r.deserialize::<MetricsRow>()
        .map(|row| row.map_err(|e| Error::Input(format!("metrics csv: {e}"))))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Markdown table: one row per dataset / manipulation with BA and AUC.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut s = String::from(
        "| Dataset | Manipulation | Real | Fake | BA | AUC |\n|---|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.2}% | {:.4} |\n",
            r.dataset,
            r.manipulation.as_deref().unwrap_or("all"),
            r.n_real,
            r.n_fake,
            r.balanced_accuracy,
            r.auc
        ));
    }
    s
}

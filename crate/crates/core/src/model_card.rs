//! Model card rendering.
//!
//! The card ships with the published evaluation of the production ensemble
//! as static data. Locally computed metrics rows are appended to the
//! evaluation section; they never replace the published figures.

use std::fmt::Write as _;

use crate::error::Result;
use crate::eval::MetricsRow;
use crate::version::ServiceVersion;

/// A published BA/AUC figure, kept as the exact printed strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishedRow {
    pub name: &'static str,
    pub ba: &'static str,
    pub auc: &'static str,
}

/// Dataset-level results: (dataset, service BA/AUC, public baseline BA/AUC).
pub const DATASET_RESULTS: [(PublishedRow, PublishedRow); 3] = [
    (
        PublishedRow {
            name: "FaceForensics++",
            ba: "70.31%",
            auc: "0.7705",
        },
        PublishedRow {
            name: "DeepWare",
            ba: "68.77%",
            auc: "0.7681",
        },
    ),
    (
        PublishedRow {
            name: "CelebDF",
            ba: "82.75%",
            auc: "0.9259",
        },
        PublishedRow {
            name: "DeepWare",
            ba: "77.54%",
            auc: "0.9493",
        },
    ),
    (
        PublishedRow {
            name: "WildDeepFake",
            ba: "84.94%",
            auc: "0.9373",
        },
        PublishedRow {
            name: "DeepWare",
            ba: "66.96%",
            auc: "0.8646",
        },
    ),
];

/// FaceForensics++ results per manipulation.
pub const MANIPULATION_RESULTS: [PublishedRow; 4] = [
    PublishedRow {
        name: "FaceSwap",
        ba: "78.40%",
        auc: "0.8674",
    },
    PublishedRow {
        name: "DeepFakes",
        ba: "86.20%",
        auc: "0.9468",
    },
    PublishedRow {
        name: "NeuralTextures",
        ba: "57.65%",
        auc: "0.6276",
    },
    PublishedRow {
        name: "Face2Face",
        ba: "59.02%",
        auc: "0.6402",
    },
];

/// BA under PGD attacks: (dataset, [norm-1, norm-2, norm-inf]).
pub const ADVERSARIAL_RESULTS: [(&str, [&str; 3]); 3] = [
    ("FaceForensics++", ["70.31%", "64.04%", "50.53%"]),
    ("CelebDF", ["82.75%", "76.01%", "50.00%"]),
    ("WildDeepFake", ["84.94%", "63.04%", "50.00%"]),
];

pub const DEFAULT_INTENDED_USE: &str = "\
Screening of images and videos for facial manipulation of the identity-swap kind \
(one person's face replaced with another's). The service is meant for researchers \
and media verification professionals who treat its output as one signal among \
several, not as proof. It is not meant for automated moderation decisions, \
for identifying people, or for content without visible faces.";

pub const DEFAULT_CAVEATS: &str = "\
- The score is a probability-like value from an ensemble of classifiers; it is not calibrated \
against any particular population of media.
- Expression-swap manipulations (e.g. Face2Face, NeuralTextures) are detected much less \
reliably than identity swaps.
- Heavy compression, low resolution, small or occluded faces and extreme poses lower accuracy.
- Media without detectable faces receive no score (`overall: null`); this says nothing about authenticity.
- The models are vulnerable to white-box adversarial attacks; under a norm-inf PGD attack \
accuracy drops to chance.
- Inspect the per-shot gallery before drawing conclusions: a single high-scoring shot is enough \
to raise the overall score.";

const PIPELINE_SUMMARY: &str = "\
1. Download the media and detect whether it is an image or a video.
2. Videos: sample one frame per second, compare consecutive frames by Chamfer similarity of \
region descriptors and split into shots at distance peaks.
3. Sample up to 64 frames per shot and detect faces, expanding each box by a margin of 1.3.
4. Cluster faces within a shot by embedding similarity (> 0.8); drop clusters seen in less \
than 20% of the shot's frames.
5. Resize faces to 300 x 300, normalise with ImageNet statistics and average the ensemble's \
probabilities.
6. Aggregate: cluster = mean of its faces, shot = max over clusters, video = max over shots.";

const METRICS_EXPLANATION: &str = "\
- **Balanced accuracy (BA)** is the mean of the recall on real media and the recall on fake \
media at a 0.5 decision threshold. Unlike plain accuracy it is not inflated when one class \
dominates the dataset; 50% is chance level.
- **AUC** is the area under the ROC curve: the probability that a randomly chosen fake item \
scores higher than a randomly chosen real one (ties count half). It is threshold-free; 0.5 is \
chance level and 1.0 a perfect ranking.";

/// Renders the card as markdown. `local` rows (e.g. from `dfscan eval`) are
/// listed after the published results.
pub fn render_model_card(
    local: &[MetricsRow],
    version: &str,
    intended_use: Option<&str>,
    caveats: Option<&str>,
) -> Result<String> {
    let version: ServiceVersion = version.parse()?;
    let mut s = String::new();
    // writing to a String cannot fail
    let _ = writeln!(s, "# Model card: dfscan deepfake detection service\n");
    let _ = writeln!(s, "## Model details\n");
    let _ = writeln!(s, "- Service version: {version}");
    let _ = writeln!(s, "- Input: URL of an image or video; output: a deepfake probability per face, shot and item.");
    let _ = writeln!(s, "- Architecture: face-level ensemble of binary classifiers behind a shot-based video pipeline.\n");
    let _ = writeln!(s, "{PIPELINE_SUMMARY}\n");

    let _ = writeln!(s, "## Intended use\n");
    let _ = writeln!(
        s,
        "{}\n",
        intended_use.unwrap_or(DEFAULT_INTENDED_USE).trim()
    );

    let _ = writeln!(s, "## Caveats and recommendations\n");
    let _ = writeln!(s, "{}\n", caveats.unwrap_or(DEFAULT_CAVEATS).trim());

    let _ = writeln!(s, "## Evaluation\n");
    let _ = writeln!(s, "Published results of the production ensemble; they are reference figures, not reproduced by this build.\n");
    let _ = writeln!(s, "### Results per dataset\n");
    let _ = writeln!(s, "| Dataset | BA | AUC | DeepWare BA | DeepWare AUC |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|");
    for (ours, theirs) in DATASET_RESULTS {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            ours.name, ours.ba, ours.auc, theirs.ba, theirs.auc
        );
    }
    let _ = writeln!(s, "\n### Results per manipulation (FaceForensics++)\n");
    let _ = writeln!(s, "| Manipulation | BA | AUC |");
    let _ = writeln!(s, "|---|---:|---:|");
    for r in MANIPULATION_RESULTS {
        let _ = writeln!(s, "| {} | {} | {} |", r.name, r.ba, r.auc);
    }
    let _ = writeln!(s, "\n### Adversarial robustness (BA under PGD)\n");
    let _ = writeln!(s, "| Dataset | norm-1 | norm-2 | norm-inf |");
    let _ = writeln!(s, "|---|---:|---:|---:|");
    for (name, [n1, n2, ninf]) in ADVERSARIAL_RESULTS {
        let _ = writeln!(s, "| {name} | {n1} | {n2} | {ninf} |");
    }
    if !local.is_empty() {
        let _ = writeln!(s, "\n### Local evaluation\n");
        let _ = writeln!(s, "{}", crate::eval::format_table(local).trim_end());
    }

    let _ = writeln!(s, "\n## Metrics\n");
    let _ = writeln!(s, "{METRICS_EXPLANATION}\n");

    let _ = writeln!(s, "## Version history\n");
    let _ = writeln!(s, "| Version | Changes |");
    let _ = writeln!(s, "|---|---|");
    let _ = writeln!(s, "| {version} | Current release. |");
    Ok(s)
}

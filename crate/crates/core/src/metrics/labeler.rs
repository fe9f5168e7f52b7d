//! Keyword labeler over the 14 CheXpert observation categories.

use serde::{Deserialize, Serialize};

pub const NUM_FINDINGS: usize = 14;

/// Observation categories, in the fixed order used by [`FindingLabels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Finding {
    NoFinding,
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungLesion,
    LungOpacity,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
}

impl Finding {
    pub const ALL: [Finding; NUM_FINDINGS] = [
        Finding::NoFinding,
        Finding::EnlargedCardiomediastinum,
        Finding::Cardiomegaly,
        Finding::LungLesion,
        Finding::LungOpacity,
        Finding::Edema,
        Finding::Consolidation,
        Finding::Pneumonia,
        Finding::Atelectasis,
        Finding::Pneumothorax,
        Finding::PleuralEffusion,
        Finding::PleuralOther,
        Finding::Fracture,
        Finding::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Finding::NoFinding => "No Finding",
            Finding::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Finding::Cardiomegaly => "Cardiomegaly",
            Finding::LungLesion => "Lung Lesion",
            Finding::LungOpacity => "Lung Opacity",
            Finding::Edema => "Edema",
            Finding::Consolidation => "Consolidation",
            Finding::Pneumonia => "Pneumonia",
            Finding::Atelectasis => "Atelectasis",
            Finding::Pneumothorax => "Pneumothorax",
            Finding::PleuralEffusion => "Pleural Effusion",
            Finding::PleuralOther => "Pleural Other",
            Finding::Fracture => "Fracture",
            Finding::SupportDevices => "Support Devices",
        }
    }

    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            Finding::NoFinding => &[
                "no acute cardiopulmonary abnormality",
                "no acute cardiopulmonary process",
                "no acute disease",
                "normal chest",
            ],
            Finding::EnlargedCardiomediastinum => &[
                "enlarged cardiomediastinum",
                "widened mediastinum",
                "mediastinal widening",
            ],
            Finding::Cardiomegaly => &["cardiomegaly", "heart is enlarged", "enlarged heart"],
            Finding::LungLesion => &["nodule", "nodules", "mass", "lung lesion"],
            Finding::LungOpacity => &["opacity", "opacities"],
            Finding::Edema => &["edema"],
            Finding::Consolidation => &["consolidation"],
            Finding::Pneumonia => &["pneumonia"],
            Finding::Atelectasis => &["atelectasis"],
            Finding::Pneumothorax => &["pneumothorax"],
            Finding::PleuralEffusion => &["pleural effusion", "effusion", "effusions"],
            Finding::PleuralOther => &["pleural thickening", "fibrosis"],
            Finding::Fracture => &["fracture", "fractures"],
            Finding::SupportDevices => &["pacemaker", "catheter", "tube", "support device"],
        }
    }
}

const NEGATION_CUES: [&[&str]; 4] = [&["no"], &["without"], &["free", "of"], &["negative", "for"]];
const NEGATION_WINDOW: usize = 3;

/// Positive/negative flag per finding in [`Finding::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FindingLabels(pub [bool; NUM_FINDINGS]);

impl FindingLabels {
    pub fn from_findings(findings: &[Finding]) -> Self {
        let mut labels = [false; NUM_FINDINGS];
        for f in findings {
            labels[f.index()] = true;
        }
        Self(labels)
    }

    pub fn is_positive(&self, f: Finding) -> bool {
        self.0[f.index()]
    }

    pub fn positives(&self) -> Vec<Finding> {
        Finding::ALL
            .iter()
            .copied()
            .filter(|f| self.is_positive(*f))
            .collect()
    }
}

fn contains_seq(window: &[&str], needle: &[&str]) -> bool {
    window.windows(needle.len()).any(|w| w == needle)
}

fn negated(tokens: &[&str], start: usize) -> bool {
    let window = &tokens[start.saturating_sub(NEGATION_WINDOW)..start];
    NEGATION_CUES.iter().any(|cue| contains_seq(window, cue))
}

/// A finding is positive when any of its phrases occurs without a negation
/// cue among the three preceding tokens.
pub fn label_findings<S: AsRef<str>>(tokens: &[S]) -> FindingLabels {
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut labels = [false; NUM_FINDINGS];
    for f in Finding::ALL {
        'phrases: for phrase in f.keywords() {
            let phrase: Vec<&str> = phrase.split(' ').collect();
            if phrase.len() > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - phrase.len() {
                if tokens[start..start + phrase.len()] == phrase[..] && !negated(&tokens, start) {
                    labels[f.index()] = true;
                    break 'phrases;
                }
            }
        }
    }
    FindingLabels(labels)
}

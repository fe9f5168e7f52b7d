use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::text::normalize_text;
use crate::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(rename = "image_path")]
    pub image_paths: Vec<PathBuf>,
    pub report: String,
}

/// Train/val/test partition of samples with normalized reports.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationSet {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl AnnotationSet {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses the R2Gen-style document `{"train": [...], "val": [...], "test": [...]}`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut doc: BTreeMap<String, Vec<Sample>> =
            serde_json::from_str(text).map_err(|e| Error::Annotation(e.to_string()))?;
        let mut take = |name: &str| -> Result<Vec<Sample>> {
            let mut samples = doc
                .remove(name)
                .ok_or_else(|| Error::MissingSplit(name.to_string()))?;
            for s in &mut samples {
                s.report = normalize_text(&s.report);
            }
            Ok(samples)
        };
        let set = Self {
            train: take("train")?,
            val: take("val")?,
            test: take("test")?,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn to_json_string(&self) -> String {
        let doc: BTreeMap<&str, &Vec<Sample>> = [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
        .into_iter()
        .collect();
        serde_json::to_string_pretty(&doc).expect("annotations serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in self.split(split) {
                if s.image_paths.is_empty() {
                    return Err(Error::Annotation(format!("sample '{}' has no image", s.id)));
                }
                if s.image_paths.len() > 2 {
                    return Err(Error::Annotation(format!(
                        "sample '{}' has {} views, at most 2 supported",
                        s.id,
                        s.image_paths.len()
                    )));
                }
                if s.report.trim().is_empty() {
                    return Err(Error::Annotation(format!(
                        "sample '{}' has an empty report",
                        s.id
                    )));
                }
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Annotation(format!(
                        "sample id '{}' appears more than once",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationSet::from_json_str(&text)
}

pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    fs::write(path, set.to_json_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses() {
        let text = r#"{"train":[{"id":"a","image_path":["x.png"],"report":"No acute disease."}],
                       "val":[],"test":[]}"#;
        let set = AnnotationSet::from_json_str(text).unwrap();
        assert_eq!(set.train.len(), 1);
        assert_eq!(set.train[0].report, "no acute disease .");
    }

    #[test]
    fn missing_split_is_named() {
        let text = r#"{"train":[],"val":[]}"#;
        let err = AnnotationSet::from_json_str(text).unwrap_err();
        assert_eq!(err.to_string(), "split 'test' absent");
    }

    #[test]
    fn rejects_invalid_samples() {
        let no_image = r#"{"train":[{"id":"a","image_path":[],"report":"x"}],"val":[],"test":[]}"#;
        assert!(AnnotationSet::from_json_str(no_image).is_err());
        let empty =
            r#"{"train":[{"id":"a","image_path":["p"],"report":" !! "}],"val":[],"test":[]}"#;
        assert!(AnnotationSet::from_json_str(empty).is_err());
        let dup = r#"{"train":[{"id":"a","image_path":["p"],"report":"x"}],
                      "val":[{"id":"a","image_path":["p"],"report":"y"}],"test":[]}"#;
        assert!(AnnotationSet::from_json_str(dup).is_err());
    }
}

//! Desk-scale synthetic chest films with templated reports.
//!
//! Every abnormal finding has its own primitive drawn at its own location, so
//! the report is a deterministic function of what is drawn.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::annotations::{save_annotations, AnnotationSet, Sample};
use super::image::RawImage;
use crate::metrics::labeler::Finding;
use crate::{Error, Result};

pub const SYNTH_IMAGE_SIZE: usize = 224;

/// Corpus plus the in-memory images it references, keyed by relative path.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub annotations: AnnotationSet,
    pub images: BTreeMap<PathBuf, RawImage>,
    pub findings: BTreeMap<String, Vec<Finding>>,
}

impl SynthCorpus {
    /// Writes `annotation.json` and `images/*.png` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (rel, img) in &self.images {
            img.save_png(&dir.join(rel))?;
        }
        let ann = dir.join("annotation.json");
        save_annotations(&self.annotations, &ann)?;
        Ok(ann)
    }
}

/// 7:1:2 split sizes with at least one sample in val and test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n / 10).max(1);
    let test = (n / 5).max(1);
    (n - val - test, val, test)
}

fn sentence(f: Finding) -> &'static str {
    match f {
        Finding::NoFinding => "the lungs are clear . no acute cardiopulmonary abnormality .",
        Finding::EnlargedCardiomediastinum => "there is a widened mediastinum .",
        Finding::Cardiomegaly => "the heart is enlarged .",
        Finding::LungLesion => "there is a nodule in the right upper lobe .",
        Finding::LungOpacity => "there is an opacity in the left lower lobe .",
        Finding::Edema => "there is mild pulmonary edema .",
        Finding::Consolidation => "there is focal consolidation in the right lower lobe .",
        Finding::Pneumonia => "findings are concerning for pneumonia .",
        Finding::Atelectasis => "there is mild basilar atelectasis .",
        Finding::Pneumothorax => "there is a small left pneumothorax .",
        Finding::PleuralEffusion => "there is a small right pleural effusion .",
        Finding::PleuralOther => "there is left pleural thickening .",
        Finding::Fracture => "there is an old rib fracture .",
        Finding::SupportDevices => "a pacemaker is in place .",
    }
}

/// Report for a set of abnormal findings; an empty set yields the normal report.
pub fn report_for(findings: &[Finding]) -> String {
    let mut sorted: Vec<Finding> = findings.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut parts: Vec<&str> = Vec::new();
    if sorted.contains(&Finding::Cardiomegaly) {
        parts.push(sentence(Finding::Cardiomegaly));
    } else {
        parts.push("the heart size is normal .");
    }
    for &f in &sorted {
        if f != Finding::Cardiomegaly && f != Finding::NoFinding {
            parts.push(sentence(f));
        }
    }
    if !sorted.contains(&Finding::Pneumothorax) {
        parts.push("no pneumothorax .");
    }
    if !sorted.contains(&Finding::PleuralEffusion) {
        parts.push("no pleural effusion .");
    }
    if sorted.iter().all(|&f| f == Finding::NoFinding) {
        parts.push(sentence(Finding::NoFinding));
    }
    parts.join(" ")
}

struct Canvas {
    img: RawImage,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            img: RawImage::filled(1, size, size, 0.0),
        }
    }

    fn paint(&mut self, mut inside: impl FnMut(f32, f32) -> bool, value: f32) {
        let n = self.img.width;
        for y in 0..n {
            for x in 0..n {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    *self.img.at_mut(0, y, x) = value;
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, value: f32) {
        self.paint(
            |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            value,
        );
    }

    fn ring(&mut self, cx: f32, cy: f32, r_in: f32, r_out: f32, value: f32) {
        self.paint(
            |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d >= r_in && d <= r_out
            },
            value,
        );
    }

    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, value: f32) {
        self.paint(|x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1, value);
    }
}

fn draw_finding(c: &mut Canvas, f: Finding, jx: f32, jy: f32) {
    match f {
        Finding::NoFinding => {}
        Finding::EnlargedCardiomediastinum => {
            c.rect(94.0 + jx, 30.0 + jy, 130.0 + jx, 95.0 + jy, 0.75)
        }
        // Drawn through the heart size in `draw_background`.
        Finding::Cardiomegaly => {}
        Finding::LungLesion => c.ellipse(62.0 + jx, 66.0 + jy, 11.0, 11.0, 0.95),
        Finding::LungOpacity => c.rect(140.0 + jx, 140.0 + jy, 172.0 + jx, 172.0 + jy, 0.6),
        Finding::Edema => {
            for k in 0..3 {
                let y = 100.0 + jy + 8.0 * k as f32;
                c.rect(36.0 + jx, y, 92.0 + jx, y + 3.0, 0.7);
            }
        }
        Finding::Consolidation => c.ellipse(66.0 + jx, 160.0 + jy, 17.0, 14.0, 0.85),
        Finding::Pneumonia => c.ring(166.0 + jx, 92.0 + jy, 9.0, 17.0, 0.9),
        Finding::Atelectasis => c.rect(140.0 + jx, 190.0 + jy, 190.0 + jx, 196.0 + jy, 0.8),
        Finding::Pneumothorax => c.ellipse(178.0 + jx, 48.0 + jy, 18.0, 12.0, 0.0),
        Finding::PleuralEffusion => c.rect(26.0 + jx, 192.0 + jy, 84.0 + jx, 214.0 + jy, 0.7),
        Finding::PleuralOther => c.rect(204.0 + jx, 60.0 + jy, 210.0 + jx, 180.0 + jy, 0.85),
        Finding::Fracture => {
            c.rect(20.0 + jx, 118.0 + jy, 44.0 + jx, 122.0 + jy, 1.0);
            c.rect(30.0 + jx, 108.0 + jy, 34.0 + jx, 132.0 + jy, 1.0);
        }
        Finding::SupportDevices => {
            c.rect(150.0 + jx, 20.0 + jy, 176.0 + jx, 36.0 + jy, 1.0);
            c.rect(128.0 + jx, 26.0 + jy, 150.0 + jx, 29.0 + jy, 1.0);
        }
    }
}

fn draw_background(c: &mut Canvas, cardiomegaly: bool) {
    c.rect(0.0, 0.0, 224.0, 224.0, 0.35);
    c.ellipse(64.0, 120.0, 44.0, 84.0, 0.12);
    c.ellipse(160.0, 120.0, 44.0, 84.0, 0.12);
    c.rect(106.0, 0.0, 118.0, 224.0, 0.55);
    let (rx, ry) = if cardiomegaly {
        (46.0, 36.0)
    } else {
        (28.0, 24.0)
    };
    c.ellipse(120.0, 150.0, rx, ry, 0.5);
}

fn render(findings: &[Finding], rng: &mut ChaCha8Rng) -> RawImage {
    let mut canvas = Canvas::new(SYNTH_IMAGE_SIZE);
    draw_background(&mut canvas, findings.contains(&Finding::Cardiomegaly));
    for &f in findings {
        let jx = rng.random_range(-5.0f32..=5.0);
        let jy = rng.random_range(-5.0f32..=5.0);
        draw_finding(&mut canvas, f, jx, jy);
    }
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let mut img = canvas.img;
    for p in &mut img.pixels {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Deterministic corpus of `n` samples split 7:1:2.
pub fn synth_dataset(seed: u64, n: usize) -> Result<SynthCorpus> {
    if n < 3 {
        return Err(Error::invalid(format!(
            "synthetic corpus needs n >= 3, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let abnormal: Vec<Finding> = Finding::ALL
        .iter()
        .copied()
        .filter(|&f| f != Finding::NoFinding)
        .collect();
    let (n_train, n_val, _) = split_sizes(n);
    let mut corpus = SynthCorpus {
        annotations: AnnotationSet::default(),
        images: BTreeMap::new(),
        findings: BTreeMap::new(),
    };
    for i in 0..n {
        let count = rng.random_range(0..=3usize);
        let mut findings: Vec<Finding> = sample_indices(&mut rng, abnormal.len(), count)
            .into_iter()
            .map(|k| abnormal[k])
            .collect();
        findings.sort();
        let img = render(&findings, &mut rng);
        let id = format!("synth-{seed}-{i:04}");
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        let sample = Sample {
            id: id.clone(),
            image_paths: vec![rel.clone()],
            report: report_for(&findings),
        };
        corpus.images.insert(rel, img);
        corpus.findings.insert(id, findings);
        let dest = if i < n_train {
            &mut corpus.annotations.train
        } else if i < n_train + n_val {
            &mut corpus.annotations.val
        } else {
            &mut corpus.annotations.test
        };
        dest.push(sample);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::{normalize_text, Vocabulary, UNK};

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(20), (14, 2, 4));
        assert_eq!(split_sizes(3), (1, 1, 1));
        assert_eq!(split_sizes(100), (70, 10, 20));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_dataset(7, 6).unwrap();
        let b = synth_dataset(7, 6).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(8, 6).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn twenty_samples_split_14_2_4() {
        let c = synth_dataset(0, 20).unwrap();
        assert_eq!(c.annotations.train.len(), 14);
        assert_eq!(c.annotations.val.len(), 2);
        assert_eq!(c.annotations.test.len(), 4);
        c.annotations.validate().unwrap();
    }

    #[test]
    fn closed_grammar_has_no_unknowns() {
        let c = synth_dataset(3, 30).unwrap();
        let reports: Vec<&str> = c
            .annotations
            .train
            .iter()
            .chain(&c.annotations.val)
            .chain(&c.annotations.test)
            .map(|s| s.report.as_str())
            .collect();
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        for r in &reports {
            let t = vocab.tokenize(r, 80).unwrap();
            assert!(!t.ids.contains(&UNK));
            assert_eq!(vocab.detokenize(&t.ids), *r);
        }
    }

    #[test]
    fn reports_are_already_normalized() {
        for f in Finding::ALL {
            let r = report_for(&[f]);
            assert_eq!(normalize_text(&r), r);
        }
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let c = synth_dataset(11, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ann = c.write_to(dir.path()).unwrap();
        let back = crate::data::load_annotations(&ann).unwrap();
        assert_eq!(back, c.annotations);
        let rel = &c.annotations.train[0].image_paths[0];
        let img = RawImage::load(&dir.path().join(rel), SYNTH_IMAGE_SIZE).unwrap();
        let orig = &c.images[rel];
        let max_err = img
            .pixels
            .iter()
            .zip(&orig.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }
}

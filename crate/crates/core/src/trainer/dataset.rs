use std::path::Path;

use crate::data::{load_annotations, AnnotationSet, RawImage, Sample, Split, SynthCorpus};
use crate::{Error, Result};

/// A sample with its views decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// Empty for text-only data.
    pub images: Vec<RawImage>,
    pub report: String,
}

/// Decoded train/val/test splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Reads the annotation file and every referenced image, resized to
    /// `image_size`. Image paths are resolved against `root`, or the
    /// annotation file's directory. Views beyond `views` are dropped.
    pub fn load(
        annotations: &Path,
        root: Option<&Path>,
        image_size: usize,
        views: usize,
    ) -> Result<Self> {
        let set = load_annotations(annotations)?;
        let root = root
            .map(Path::to_path_buf)
            .unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).to_path_buf());
        Self::from_annotations(
            &set,
            |rel| RawImage::load(&root.join(rel), image_size),
            views,
        )
    }

    /// In-memory images of a synthetic corpus, resized to `image_size`.
    pub fn from_synth(corpus: &SynthCorpus, image_size: usize, views: usize) -> Result<Self> {
        Self::from_annotations(
            &corpus.annotations,
            |rel| {
                corpus
                    .images
                    .get(rel)
                    .ok_or_else(|| Error::Image(format!("{} not in corpus", rel.display())))?
                    .resized(image_size)
            },
            views,
        )
    }

    fn from_annotations<F>(set: &AnnotationSet, mut load: F, views: usize) -> Result<Self>
    where
        F: FnMut(&Path) -> Result<RawImage>,
    {
        let mut convert = |samples: &[Sample]| -> Result<Vec<Example>> {
            samples
                .iter()
                .map(|s| {
                    let images = s
                        .image_paths
                        .iter()
                        .take(views)
                        .map(|p| load(p))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Example {
                        id: s.id.clone(),
                        images,
                        report: s.report.clone(),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: convert(&set.train)?,
            val: convert(&set.val)?,
            test: convert(&set.test)?,
        })
    }

    /// The same reports with every image removed.
    pub fn text_only(mut self) -> Self {
        for e in self
            .train
            .iter_mut()
            .chain(&mut self.val)
            .chain(&mut self.test)
        {
            e.images.clear();
        }
        self
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train_reports(&self) -> Vec<&str> {
        self.train.iter().map(|e| e.report.as_str()).collect()
    }
}

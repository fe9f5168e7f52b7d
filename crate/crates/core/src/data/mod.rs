//! Annotation ingestion, vocabulary, tokenization, image handling and the
//! synthetic corpus.

mod annotations;
mod image;
pub mod synth;
mod text;

pub use annotations::{load_annotations, save_annotations, AnnotationSet, Sample, Split, SPLITS};
pub use image::{degrade_image, RawImage};
pub use synth::{synth_dataset, SynthCorpus};
pub use text::{
    normalize_text, normalize_tokens, tokenize, TokenizedReport, Vocabulary, BOS, EOS, MASK, PAD,
    UNK,
};

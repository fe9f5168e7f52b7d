use std::collections::HashSet;

use crate::data::normalize_tokens;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

/// Reference/hypothesis pairs with unique ids and non-empty references.
/// Hypotheses may be empty (a decoder may stop immediately).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pairs: Vec<Pair>,
}

impl Corpus {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        let mut ids = HashSet::new();
        for p in &pairs {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Metric(format!("duplicate pair id '{}'", p.id)));
            }
            if p.reference.is_empty() {
                return Err(Error::Metric(format!("empty reference for '{}'", p.id)));
            }
        }
        Ok(Self { pairs })
    }

    /// Builds a corpus from raw strings, ids assigned by position.
    pub fn from_texts<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<Self> {
        if refs.len() != hyps.len() {
            return Err(Error::Metric(format!(
                "{} references vs {} hypotheses",
                refs.len(),
                hyps.len()
            )));
        }
        Self::new(
            refs.iter()
                .zip(hyps)
                .enumerate()
                .map(|(i, (r, h))| Pair {
                    id: i.to_string(),
                    reference: normalize_tokens(r.as_ref()),
                    hypothesis: normalize_tokens(h.as_ref()),
                })
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mean with a summation order independent of the input order.
pub(crate) fn order_free_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

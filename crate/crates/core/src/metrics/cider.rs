use std::collections::BTreeMap;

use super::corpus::{ngrams, order_free_mean, Corpus};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderConfig {
    /// Length-gaussian width; `None` disables the length factor.
    pub sigma: Option<f64>,
    /// Clip hypothesis tf-idf weights by the reference weights.
    pub clip: bool,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self {
            sigma: Some(6.0),
            clip: true,
        }
    }
}

type Vector<'a> = BTreeMap<&'a [String], f64>;

fn counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut map = BTreeMap::new();
    for g in ngrams(tokens, n) {
        *map.entry(g).or_default() += 1;
    }
    map
}

/// CIDEr-D style consensus score in `[0, 10]`, idf taken over the references.
pub fn cider(corpus: &Corpus) -> Result<f64> {
    cider_with(corpus, CiderConfig::default())
}

pub fn cider_with<'c>(corpus: &'c Corpus, cfg: CiderConfig) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Metric(
            "CIDEr needs at least two pairs for document frequencies".into(),
        ));
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut per_pair = vec![0.0f64; corpus.len()];
    for n in 1..=4 {
        let ref_counts: Vec<_> = corpus
            .pairs()
            .iter()
            .map(|p| counts(&p.reference, n))
            .collect();
        let mut df: BTreeMap<&'c [String], usize> = BTreeMap::new();
        for c in &ref_counts {
            for g in c.keys() {
                *df.entry(*g).or_default() += 1;
            }
        }
        let weigh = |c: &BTreeMap<&'c [String], usize>| -> Vector<'c> {
            c.iter()
                .map(|(g, &tf)| {
                    let idf = log_docs - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
                    (*g, tf as f64 * idf)
                })
                .collect()
        };
        for (k, pair) in corpus.pairs().iter().enumerate() {
            let hyp_counts = counts(&pair.hypothesis, n);
            let vh = weigh(&hyp_counts);
            let vr = weigh(&ref_counts[k]);
            let norm = |v: &Vector| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nh, nr) = (norm(&vh), norm(&vr));
            if nh == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vh
                .iter()
                .filter_map(|(g, &h)| {
                    vr.get(g)
                        .map(|&r| if cfg.clip { h.min(r) * r } else { h * r })
                })
                .sum();
            let mut sim = dot / (nh * nr);
            if let Some(sigma) = cfg.sigma {
                let delta = pair.hypothesis.len() as f64 - pair.reference.len() as f64;
                sim *= (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            per_pair[k] += sim / 4.0;
        }
    }
    Ok(10.0 * order_free_mean(per_pair))
}

use std::collections::HashMap;

use super::corpus::{ngrams, Corpus};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuConfig {
    /// Value substituted for a zero modified precision; `None` leaves it at 0.
    pub zero_precision_epsilon: Option<f64>,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            zero_precision_epsilon: Some(1e-9),
        }
    }
}

/// Corpus-level BLEU with uniform weights over 1..=max_n.
pub fn bleu(corpus: &Corpus, max_n: usize) -> Result<f64> {
    bleu_with(corpus, max_n, BleuConfig::default())
}

pub fn bleu_with(corpus: &Corpus, max_n: usize, cfg: BleuConfig) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Metric("BLEU of an empty corpus".into()));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Metric(format!("BLEU order {max_n} outside 1..=4")));
    }
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for pair in corpus.pairs() {
        hyp_len += pair.hypothesis.len();
        ref_len += pair.reference.len();
        for n in 1..=max_n {
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(&pair.reference, n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(&pair.hypothesis, n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            total[n - 1] += pair.hypothesis.len().saturating_sub(n - 1);
            matched[n - 1] += hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
        let p = match (p, cfg.zero_precision_epsilon) {
            (p, _) if p > 0.0 => p,
            (_, Some(eps)) => eps,
            (_, None) => return Ok(0.0),
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

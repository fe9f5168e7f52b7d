//! METEOR without synonym resources: exact matching, then a crude suffix stem.

use super::corpus::{order_free_mean, Corpus};

const SUFFIXES: [&str; 4] = ["ing", "ed", "es", "s"];

pub fn crude_stem(word: &str) -> &str {
    for suffix in SUFFIXES {
        if let Some(stem) = word.strip_suffix(suffix) {
            if stem.len() >= 2 {
                return stem;
            }
        }
    }
    word
}

/// Aligns hypothesis tokens to reference tokens, preferring to extend the
/// current chunk. Returns `(hyp_index, ref_index)` pairs sorted by hypothesis.
fn align(reference: &[String], hypothesis: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_match: Vec<Option<usize>> = vec![None; hypothesis.len()];
    let stages: [fn(&str) -> &str; 2] = [|w| w, crude_stem];
    for key in stages {
        for i in 0..hypothesis.len() {
            if hyp_match[i].is_some() {
                continue;
            }
            let h = key(&hypothesis[i]);
            let candidates =
                (0..reference.len()).filter(|&j| !ref_used[j] && key(&reference[j]) == h);
            let follow = i.checked_sub(1).and_then(|p| hyp_match[p]).map(|j| j + 1);
            let next = hypothesis.get(i + 1).map(|w| key(w));
            let leads = |j: usize| {
                next.is_some_and(|n| {
                    j + 1 < reference.len() && !ref_used[j + 1] && key(&reference[j + 1]) == n
                })
            };
            // rank: continues the previous chunk, then starts a chunk the next
            // token can extend, then leftmost
            let chosen = candidates.min_by_key(|&j| {
                let rank = if Some(j) == follow {
                    0
                } else if leads(j) {
                    1
                } else {
                    2
                };
                (rank, j)
            });
            if let Some(j) = chosen {
                ref_used[j] = true;
                hyp_match[i] = Some(j);
            }
        }
    }
    hyp_match
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

pub fn meteor_lite_pair(reference: &[String], hypothesis: &[String]) -> f64 {
    let alignment = align(reference, hypothesis);
    let matches = alignment.len();
    if matches == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = matches as f64 / hypothesis.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite(corpus: &Corpus) -> f64 {
    order_free_mean(
        corpus
            .pairs()
            .iter()
            .map(|p| meteor_lite_pair(&p.reference, &p.hypothesis))
            .collect(),
    )
}

use super::corpus::{order_free_mean, Corpus};

const BETA: f64 = 1.2;

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair with beta = 1.2.
pub fn rouge_l_pair(reference: &[String], hypothesis: &[String]) -> f64 {
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / hypothesis.len() as f64;
    let b2 = BETA * BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &Corpus) -> f64 {
    order_free_mean(
        corpus
            .pairs()
            .iter()
            .map(|p| rouge_l_pair(&p.reference, &p.hypothesis))
            .collect(),
    )
}

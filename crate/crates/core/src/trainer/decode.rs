use candle_core::DType;

use super::config::{DecodeConfig, DecodeStrategy};
use super::dataset::Example;
use crate::backbone::ModelConfig;
use crate::causal::{decode_prefix, visual_context, CausalTrace, Mode, VisualContext};
use crate::data::{RawImage, Vocabulary, BOS, EOS, MASK, PAD};
use crate::metrics::{evaluate_corpus, Corpus, EvalReport, MetricConfig};
use crate::nn::{log_softmax_last, ParamStore};
use crate::{Error, Result};

/// Tokens `generate` may never produce.
const BLOCKED: [u32; 3] = [PAD, BOS, MASK];

/// Frozen parameters plus what is needed to run them.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
struct Hypothesis {
    ids: Vec<u32>,
    logp: f64,
    done: bool,
}

impl Hypothesis {
    /// Length-normalized score; `eos` counts towards the length.
    fn score(&self, alpha: f64) -> f64 {
        let len = (self.ids.len() - 1).max(1) as f64;
        self.logp / len.powf(alpha)
    }
}

impl Generator<'_> {
    /// Next-token log-probabilities after `prefix`, blocked tokens at `-inf`.
    fn next_logp(&self, ctx: &VisualContext, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits = decode_prefix(self.params, self.config, ctx, prefix)?;
        let last = logits.get(prefix.len() - 1)?;
        let mut lp = log_softmax_last(&last)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        for b in BLOCKED {
            lp[b as usize] = f64::NEG_INFINITY;
        }
        Ok(lp)
    }

    /// Generated ids without `bos` and `eos`.
    pub fn generate_ids(&self, images: &[RawImage], dc: &DecodeConfig) -> Result<Vec<u32>> {
        let ctx = visual_context(self.params, self.config, images, self.mode)?;
        self.decode(&ctx, dc)
    }

    fn decode(&self, ctx: &VisualContext, dc: &DecodeConfig) -> Result<Vec<u32>> {
        if dc.max_len < 2 || dc.beam_width == 0 {
            return Err(Error::invalid(
                "decode needs max_len >= 2 and a positive beam",
            ));
        }
        // The decoder can see at most `max_len - 1` input positions.
        let cap = dc.max_len.min(self.config.max_len);
        let width = match dc.strategy {
            DecodeStrategy::Greedy => 1,
            DecodeStrategy::Beam => dc.beam_width,
        };
        let mut beams = vec![Hypothesis {
            ids: vec![BOS],
            logp: 0.0,
            done: false,
        }];
        while beams.iter().any(|h| !h.done && h.ids.len() < cap) {
            let mut cands: Vec<Hypothesis> = Vec::new();
            for h in &beams {
                if h.done || h.ids.len() >= cap {
                    cands.push(h.clone());
                    continue;
                }
                let lp = self.next_logp(ctx, &h.ids)?;
                let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &t in order.iter().take(width) {
                    let mut ids = h.ids.clone();
                    ids.push(t as u32);
                    cands.push(Hypothesis {
                        ids,
                        logp: h.logp + lp[t],
                        done: t as u32 == EOS,
                    });
                }
            }
            // stable sort keeps earlier beams and lower ids first on ties
            cands.sort_by(|a, b| {
                b.score(dc.length_penalty)
                    .total_cmp(&a.score(dc.length_penalty))
            });
            cands.truncate(width);
            beams = cands;
        }
        let best = &beams[0];
        Ok(best.ids[1..]
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .collect())
    }

    pub fn generate(&self, images: &[RawImage], dc: &DecodeConfig) -> Result<String> {
        Ok(self.vocab.detokenize(&self.generate_ids(images, dc)?))
    }

    /// Generated report plus the deconfounding dump (absent in baseline mode).
    pub fn generate_traced(
        &self,
        images: &[RawImage],
        dc: &DecodeConfig,
    ) -> Result<(String, Option<CausalTrace>)> {
        let ctx = visual_context(self.params, self.config, images, self.mode)?;
        let text = self.vocab.detokenize(&self.decode(&ctx, dc)?);
        let trace = ctx.mediators.as_ref().map(|m| m.trace()).transpose()?;
        Ok((text, trace))
    }

    /// Generates for every example and scores against the references.
    pub fn evaluate(&self, examples: &[Example], dc: &DecodeConfig) -> Result<Evaluation> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let hypotheses = examples
            .iter()
            .map(|e| {
                if e.images.is_empty() {
                    return Err(Error::invalid(format!("sample '{}' has no image", e.id)));
                }
                Ok((e.id.clone(), self.generate(&e.images, dc)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = examples.iter().map(|e| e.report.as_str()).collect();
        let hyps: Vec<&str> = hypotheses.iter().map(|(_, h)| h.as_str()).collect();
        let report = evaluate_corpus(&Corpus::from_texts(&refs, &hyps)?, &MetricConfig::default())?;
        Ok(Evaluation { report, hypotheses })
    }
}

/// Scores and the generated text per sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub hypotheses: Vec<(String, String)>,
}

//! Visual and linguistic deconfounding with a parameter-free front-door
//! fusion.
//!
//! The visual mediator `M_v` fuses locally sampled tokens (picked by
//! attention rollout and sharpened by a complementary-attention block) with a
//! pooled global view. The linguistic mediator `M_l` is read out of the word
//! embedding table. [`fim_fuse`] then mixes each stream with the expectation
//! over its mediator and over the stream itself.

mod modules;
mod rollout;

pub use modules::{
    caam_enhance, fim_fuse, fim_fuse_causal, global_sample, ldm_mediator, lgfm, max_pool_grid,
    relative_position_index, soft_attention,
};
pub use rollout::{accumulate_attention, local_indices, local_sample, LocalTokens};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{embed_ids, embed_image, multiway_decode, multiway_encode, ModelConfig};
use crate::data::RawImage;
use crate::nn::{to_rows, Init, ParamStore};
use crate::Result;

pub(crate) fn register_params(
    p: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (d, hidden) = (cfg.d, cfg.ffn_hidden());
    p.add_mha("vdm.caam.attn", d, rng)?;
    p.add_ffn("vdm.caam.ffn", d, hidden, d, rng)?;
    p.add_layer_norm("vdm.global.ln", d, rng)?;
    p.add_mha("vdm.global.attn", d, rng)?;
    let side = 2 * (cfg.patch_grid / 2).max(1) - 1;
    p.init(
        "vdm.global.rel_bias",
        &[cfg.heads, side * side],
        Init::Zeros,
        rng,
    )?;
    p.add_linear("vdm.global.proj", d, d, rng)?;
    p.add_mha("vdm.lgfm.self_attn", d, rng)?;
    p.add_mha("vdm.lgfm.cross_attn", d, rng)?;
    p.add_ffn("vdm.lgfm.ffn", 2 * d, hidden, d, rng)?;
    p.add_mha("ldm.vocab_attn", d, rng)?;
    p.add_ffn("ldm.ffn1", d, hidden, d, rng)?;
    p.add_mha("ldm.local_attn", d, rng)?;
    p.add_ffn("ldm.ffn2", d, hidden, d, rng)
}

/// Which decoder inputs a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Encoder output and plain word embeddings go straight to the decoder.
    Baseline,
    /// Both streams pass through the deconfounding modules first.
    Vlci,
}

/// Intermediate tensors of the deconfounding path for one sample.
#[derive(Debug, Clone)]
pub struct Mediators {
    pub scores: Vec<Vec<f64>>,
    pub local: LocalTokens,
    pub enhanced: Tensor,
    pub global: Tensor,
    pub m_v: Tensor,
    pub m_l: Tensor,
}

/// Serializable dump of [`Mediators`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTrace {
    pub scores: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
    pub m_v: Vec<Vec<f64>>,
    pub m_l: Vec<Vec<f64>>,
}

impl Mediators {
    pub fn trace(&self) -> Result<CausalTrace> {
        Ok(CausalTrace {
            scores: self.scores.clone(),
            selected: self.local.indices.clone(),
            m_v: to_rows(&self.m_v)?,
            m_l: to_rows(&self.m_l)?,
        })
    }
}

/// VDM and LDM given encoded visual tokens and the rollout-selected indices.
pub fn mediators_from_indices(
    p: &ParamStore,
    cfg: &ModelConfig,
    h_v: &Tensor,
    views: usize,
    indices: &[usize],
) -> Result<(LocalTokens, Tensor, Tensor, Tensor, Tensor)> {
    let local = LocalTokens::gather(h_v, indices)?;
    let enhanced = caam_enhance(p, cfg, &local.tokens)?;
    let global = global_sample(p, cfg, h_v, views)?;
    let m_v = lgfm(p, cfg, &enhanced, &global)?;
    let m_l = ldm_mediator(p, cfg, &enhanced, p.get("embed.tokens")?)?;
    Ok((local, enhanced, global, m_v, m_l))
}

/// Decoder-side context of one image, computed once and reused while
/// decoding step by step.
#[derive(Debug, Clone)]
pub struct VisualContext {
    pub mode: Mode,
    pub memory: Tensor,
    pub mediators: Option<Mediators>,
}

pub fn visual_context(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: &[RawImage],
    mode: Mode,
) -> Result<VisualContext> {
    let tokens = embed_image(p, cfg, images)?;
    let enc = multiway_encode(p, cfg, Some(&tokens.tokens), None)?;
    let h_v = enc.visual.expect("visual rows were supplied");
    match mode {
        Mode::Baseline => Ok(VisualContext {
            mode,
            memory: h_v,
            mediators: None,
        }),
        Mode::Vlci => {
            let scores = accumulate_attention(&enc.trace)?;
            let indices = local_indices(&scores, cfg.k_local)?;
            let (local, enhanced, global, m_v, m_l) =
                mediators_from_indices(p, cfg, &h_v, tokens.views, &indices)?;
            let memory = fim_fuse(&h_v, &m_v)?;
            Ok(VisualContext {
                mode,
                memory,
                mediators: Some(Mediators {
                    scores,
                    local,
                    enhanced,
                    global,
                    m_v,
                    m_l,
                }),
            })
        }
    }
}

/// Logits for a teacher-forced or partial prefix given a prepared context.
pub fn decode_prefix(
    p: &ParamStore,
    cfg: &ModelConfig,
    ctx: &VisualContext,
    prefix: &[u32],
) -> Result<Tensor> {
    let text = embed_ids(p, prefix, 0)?;
    let text = match &ctx.mediators {
        Some(m) => fim_fuse_causal(&text, &m.m_l)?,
        None => text,
    };
    multiway_decode(p, cfg, &text, Some(&ctx.memory))
}

/// Full forward pass: images and decoder prefix to `|prefix| × V` logits.
pub fn vlci_forward(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: &[RawImage],
    prefix: &[u32],
    mode: Mode,
) -> Result<Tensor> {
    let ctx = visual_context(p, cfg, images, mode)?;
    decode_prefix(p, cfg, &ctx, prefix)
}

#[cfg(test)]
mod tests;

//! Convolutional stem, embeddings and the multiway encoder/decoder.
//!
//! The encoder shares one attention block between image and text tokens and
//! routes each modality through its own feed-forward expert. The decoder is
//! an ordinary causal text decoder with cross-attention to a memory.

mod config;
mod embed;
mod transformer;

pub use config::{ModelConfig, STEM_STRIDE};
pub use embed::{
    embed_features, embed_ids, embed_image, embed_text, stem_features, visual_positions,
    PatchTokens,
};
pub use transformer::{
    decode_hidden, encoder_layer, multiway_decode, multiway_encode, AttentionTrace, Encoded,
};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{attend, AttnMask, Heads, Init, ParamStore, EMBED_STD};
use crate::Result;

/// Scaled dot-product multi-head attention on projected inputs.
pub fn attention(
    q: &candle_core::Tensor,
    k: &candle_core::Tensor,
    v: &candle_core::Tensor,
    mask: Option<&AttnMask>,
    heads: usize,
) -> Result<(candle_core::Tensor, candle_core::Tensor)> {
    attend(q, k, v, mask, None, Heads(heads))
}

fn register_backbone(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d;
    let mut c_in = 1;
    for (stage, &c_out) in cfg.stem_channels.iter().enumerate() {
        p.init(
            &format!("stem.{stage}.conv.w"),
            &[c_out, c_in, 3, 3],
            Init::Kaiming(c_in * 9),
            rng,
        )?;
        p.init(&format!("stem.{stage}.conv.b"), &[c_out], Init::Zeros, rng)?;
        p.add_layer_norm(&format!("stem.{stage}.ln"), c_out, rng)?;
        c_in = c_out;
    }
    p.add_linear("stem.proj", c_in, d, rng)?;

    let normal = Init::Normal(EMBED_STD);
    p.init("embed.tokens", &[cfg.vocab_size, d], normal, rng)?;
    p.init("embed.pos_text", &[cfg.max_len, d], normal, rng)?;
    p.init("embed.pos_row", &[cfg.patch_grid, d], normal, rng)?;
    p.init("embed.pos_col", &[cfg.patch_grid, d], normal, rng)?;
    p.init("embed.view", &[cfg.views, d], normal, rng)?;
    p.init("embed.mask", &[d], normal, rng)?;

    let hidden = cfg.ffn_hidden();
    for l in 0..cfg.enc_layers {
        let pre = format!("enc.{l}");
        p.add_layer_norm(&format!("{pre}.ln_attn"), d, rng)?;
        p.add_mha(&format!("{pre}.attn"), d, rng)?;
        for tag in ["v", "t"] {
            p.add_layer_norm(&format!("{pre}.ln_{tag}"), d, rng)?;
            p.add_ffn(&format!("{pre}.ffn_{tag}"), d, hidden, d, rng)?;
        }
    }
    p.add_layer_norm("enc.ln_out_v", d, rng)?;
    p.add_layer_norm("enc.ln_out_t", d, rng)?;

    for l in 0..cfg.dec_layers {
        let pre = format!("dec.{l}");
        p.add_layer_norm(&format!("{pre}.ln_self"), d, rng)?;
        p.add_mha(&format!("{pre}.self_attn"), d, rng)?;
        p.add_layer_norm(&format!("{pre}.ln_cross"), d, rng)?;
        p.add_mha(&format!("{pre}.cross_attn"), d, rng)?;
        p.add_layer_norm(&format!("{pre}.ln_ffn"), d, rng)?;
        p.add_ffn(&format!("{pre}.ffn"), d, hidden, d, rng)?;
    }
    p.add_layer_norm("dec.ln_out", d, rng)?;
    p.add_linear("dec.out", d, cfg.vocab_size, rng)
}

/// Every trainable tensor of the model (backbone, pre-training heads and the
/// deconfounding modules), drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new(dtype);
    register_backbone(&mut p, cfg, &mut rng)?;
    crate::vlp::register_params(&mut p, cfg, &mut rng)?;
    crate::causal::register_params(&mut p, cfg, &mut rng)?;
    Ok(p)
}

use candle_core::Tensor;

use crate::backbone::ModelConfig;
use crate::nn::{
    attend, causal_mask, ffn, layer_norm, linear, max_pool_2x2, mha, mha_biased, AttnMask, Heads,
    ParamStore,
};
use crate::{Error, Result};

/// Complementary-attention enhancement of the local tokens:
/// `FFN(Attn(x) − Attn⁻(x)) + x`, where `Attn⁻` softmaxes the negated logits
/// of the same query/key projections.
pub fn caam_enhance(p: &ParamStore, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let heads = Heads(cfg.heads);
    let q = linear(p, "vdm.caam.attn.q", x)?;
    let k = linear(p, "vdm.caam.attn.k", x)?;
    let v = linear(p, "vdm.caam.attn.v", x)?;
    let (main, _) = attend(&q, &k, &v, None, None, heads)?;
    let (comp, _) = attend(&q.neg()?, &k, &v, None, None, heads)?;
    let diff = (linear(p, "vdm.caam.attn.o", &main)? - linear(p, "vdm.caam.attn.o", &comp)?)?;
    Ok((ffn(p, "vdm.caam.ffn", &diff)? + x)?)
}

/// Channel-wise 2 × 2 max pooling of a row-major `grid²` token field.
pub fn max_pool_grid(x: &Tensor, grid: usize) -> Result<Tensor> {
    if grid % 2 != 0 {
        return Err(Error::invalid(format!("grid side {grid} is odd")));
    }
    let (n, d) = x.dims2()?;
    if n != grid * grid {
        return Err(Error::ShapeMismatch {
            expected: format!("{} tokens", grid * grid),
            actual: format!("{n}"),
        });
    }
    let half = grid / 2;
    Ok(max_pool_2x2(&x.t()?.reshape((1, d, grid, grid))?)?
        .reshape((d, half * half))?
        .t()?
        .contiguous()?)
}

/// Index into a `(2s − 1)²` relative-offset table for every query/key pair
/// of an `s × s` grid.
pub fn relative_position_index(side: usize) -> Vec<u32> {
    let span = 2 * side - 1;
    let n = side * side;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = i / side + side - 1 - j / side;
            let dc = i % side + side - 1 - j % side;
            idx.push((dr * span + dc) as u32);
        }
    }
    idx
}

/// Global tokens `W[P(h) + Attn(P(LN(h)))]` per view, with a learned 2-D
/// relative-position bias in the attention.
pub fn global_sample(
    p: &ParamStore,
    cfg: &ModelConfig,
    h_v: &Tensor,
    views: usize,
) -> Result<Tensor> {
    let g = cfg.patch_grid;
    if g % 2 != 0 {
        return Err(Error::invalid(format!(
            "global sampling needs an even grid, got {g}"
        )));
    }
    let half = g / 2;
    let n2 = half * half;
    let idx = Tensor::from_vec(relative_position_index(half), n2 * n2, p.device())?;
    let bias = p
        .get("vdm.global.rel_bias")?
        .index_select(&idx, 1)?
        .reshape((cfg.heads, n2, n2))?;
    let per_view = g * g;
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let rows = h_v.narrow(0, v * per_view, per_view)?;
        let pooled = max_pool_grid(&rows, g)?;
        let normed = max_pool_grid(&layer_norm(p, "vdm.global.ln", &rows)?, g)?;
        let (a, _) = mha_biased(
            p,
            "vdm.global.attn",
            &normed,
            &normed,
            None,
            Some(&bias),
            Heads(cfg.heads),
        )?;
        out.push(linear(p, "vdm.global.proj", &(pooled + a)?)?);
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Local-global fusion: `FFN([MHA(l, l, l), MHA(l, g, g)])`.
pub fn lgfm(p: &ParamStore, cfg: &ModelConfig, local: &Tensor, global: &Tensor) -> Result<Tensor> {
    let heads = Heads(cfg.heads);
    let (s, _) = mha(p, "vdm.lgfm.self_attn", local, local, None, heads)?;
    let (c, _) = mha(p, "vdm.lgfm.cross_attn", local, global, None, heads)?;
    ffn(p, "vdm.lgfm.ffn", &Tensor::cat(&[s, c], 1)?)
}

/// Linguistic mediator: the local tokens query the word table, and the result
/// queries the local tokens back.
pub fn ldm_mediator(
    p: &ParamStore,
    cfg: &ModelConfig,
    local: &Tensor,
    vocab_table: &Tensor,
) -> Result<Tensor> {
    let heads = Heads(cfg.heads);
    let (a, _) = mha(p, "ldm.vocab_attn", local, vocab_table, None, heads)?;
    let h = ffn(p, "ldm.ffn1", &a)?;
    let (b, _) = mha(p, "ldm.local_attn", &h, local, None, heads)?;
    ffn(p, "ldm.ffn2", &b)
}

/// Single-head scaled dot-product attention without projections.
pub fn soft_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    Ok(attend(q, k, v, mask, None, Heads(1))?.0)
}

/// Parameter-free front-door fusion:
/// `F + SoftAttn(F, M, M) + SoftAttn(mean(M), F, F)`, the last term broadcast
/// over rows.
pub fn fim_fuse(features: &Tensor, mediator: &Tensor) -> Result<Tensor> {
    let e_m = soft_attention(features, mediator, mediator, None)?;
    let query = mediator.mean_keepdim(0)?;
    let e_x = soft_attention(&query, features, features, None)?;
    Ok((features + e_m)?.broadcast_add(&e_x)?)
}

/// As [`fim_fuse`], but row `i` of the second expectation only sees feature
/// rows `0..=i`, so the fused text stream stays causal.
pub fn fim_fuse_causal(features: &Tensor, mediator: &Tensor) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    let e_m = soft_attention(features, mediator, mediator, None)?;
    let query = mediator
        .mean_keepdim(0)?
        .broadcast_as((n, d))?
        .contiguous()?;
    let e_x = soft_attention(&query, features, features, Some(&causal_mask(n)))?;
    Ok(((features + e_m)? + e_x)?)
}

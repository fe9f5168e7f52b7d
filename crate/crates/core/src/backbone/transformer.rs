use candle_core::{DType, Tensor, D};

use super::ModelConfig;
use crate::nn::{causal_mask, ffn, layer_norm, linear, mha, Heads, ParamStore};
use crate::{Error, Result};

/// Per-layer attention among visual tokens, `heads × Nv × Nv`, detached.
/// When text tokens share the sequence, the visual block is renormalized so
/// every row is a probability vector over visual keys.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    /// `[layer][head][row][col]` as `f64`.
    pub fn to_vec(&self) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        self.layers
            .iter()
            .map(|a| Ok(a.to_dtype(DType::F64)?.to_vec3::<f64>()?))
            .collect()
    }
}

/// Encoder outputs split back by modality.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub visual: Option<Tensor>,
    pub text: Option<Tensor>,
    pub trace: AttentionTrace,
}

impl Encoded {
    /// Visual then textual rows, the memory handed to the decoder.
    pub fn memory(&self) -> Result<Option<Tensor>> {
        Ok(match (&self.visual, &self.text) {
            (Some(v), Some(t)) => Some(Tensor::cat(&[v, t], 0)?),
            (Some(v), None) => Some(v.clone()),
            (None, Some(t)) => Some(t.clone()),
            (None, None) => None,
        })
    }
}

/// One multiway layer: shared pre-norm attention over the joint sequence,
/// then a modality-specific pre-norm FFN expert. Returns the new visual and
/// textual rows and the raw attention weights `heads × L × L`.
pub fn encoder_layer(
    p: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    visual: Option<&Tensor>,
    text: Option<&Tensor>,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let pre = format!("enc.{layer}");
    let parts: Vec<&Tensor> = visual.into_iter().chain(text).collect();
    if parts.is_empty() {
        return Err(Error::invalid("encoder called with neither image nor text"));
    }
    let x = Tensor::cat(&parts, 0)?;
    let h = layer_norm(p, &format!("{pre}.ln_attn"), &x)?;
    let (a, w) = mha(p, &format!("{pre}.attn"), &h, &h, None, Heads(cfg.heads))?;
    let x = (x + a)?;
    let nv = visual.map(|v| v.dim(0)).transpose()?.unwrap_or(0);
    let nt = x.dim(0)? - nv;
    let expert = |rows: Tensor, tag: &str| -> Result<Tensor> {
        let h = layer_norm(p, &format!("{pre}.ln_{tag}"), &rows)?;
        Ok((&rows + ffn(p, &format!("{pre}.ffn_{tag}"), &h)?)?)
    };
    let v = if nv > 0 {
        Some(expert(x.narrow(0, 0, nv)?, "v")?)
    } else {
        None
    };
    let t = if nt > 0 {
        Some(expert(x.narrow(0, nv, nt)?, "t")?)
    } else {
        None
    };
    Ok((v, t, w))
}

/// Multiway encoder with full bidirectional attention across modalities.
pub fn multiway_encode(
    p: &ParamStore,
    cfg: &ModelConfig,
    visual: Option<&Tensor>,
    text: Option<&Tensor>,
) -> Result<Encoded> {
    for m in visual.iter().chain(text.iter()) {
        let width = m.dim(1)?;
        if width != cfg.d {
            return Err(Error::ShapeMismatch {
                expected: format!("width {}", cfg.d),
                actual: format!("width {width}"),
            });
        }
    }
    let visual = visual.filter(|v| v.dim(0).map(|n| n > 0).unwrap_or(true));
    let text = text.filter(|t| t.dim(0).map(|n| n > 0).unwrap_or(true));
    let mut v = visual.cloned();
    let mut t = text.cloned();
    let mut trace = AttentionTrace::default();
    for l in 0..cfg.enc_layers {
        let (nv, nt, w) = encoder_layer(p, cfg, l, v.as_ref(), t.as_ref())?;
        if let Some(rows) = &v {
            let n = rows.dim(0)?;
            let block = w.detach().narrow(1, 0, n)?.narrow(2, 0, n)?;
            let block = if t.is_some() {
                block.broadcast_div(&block.sum_keepdim(D::Minus1)?)?
            } else {
                block
            };
            trace.layers.push(block.contiguous()?);
        }
        v = nv;
        t = nt;
    }
    let v = v.map(|x| layer_norm(p, "enc.ln_out_v", &x)).transpose()?;
    let t = t.map(|x| layer_norm(p, "enc.ln_out_t", &x)).transpose()?;
    Ok(Encoded {
        visual: v,
        text: t,
        trace,
    })
}

/// Hidden states of the decoder stack before the output projection.
pub fn decode_hidden(
    p: &ParamStore,
    cfg: &ModelConfig,
    prefix: &Tensor,
    memory: Option<&Tensor>,
) -> Result<Tensor> {
    let n = prefix.dim(0)?;
    if n == 0 {
        return Err(Error::invalid(
            "decoder prefix must hold at least one token",
        ));
    }
    let mask = causal_mask(n);
    let memory = memory.filter(|m| m.dim(0).map(|k| k > 0).unwrap_or(true));
    let mut x = prefix.clone();
    for l in 0..cfg.dec_layers {
        let pre = format!("dec.{l}");
        let h = layer_norm(p, &format!("{pre}.ln_self"), &x)?;
        let (a, _) = mha(
            p,
            &format!("{pre}.self_attn"),
            &h,
            &h,
            Some(&mask),
            Heads(cfg.heads),
        )?;
        x = (x + a)?;
        if let Some(mem) = memory {
            let h = layer_norm(p, &format!("{pre}.ln_cross"), &x)?;
            let (a, _) = mha(
                p,
                &format!("{pre}.cross_attn"),
                &h,
                mem,
                None,
                Heads(cfg.heads),
            )?;
            x = (x + a)?;
        }
        let h = layer_norm(p, &format!("{pre}.ln_ffn"), &x)?;
        x = (&x + ffn(p, &format!("{pre}.ffn"), &h)?)?;
    }
    layer_norm(p, "dec.ln_out", &x)
}

/// Causal decoder: row `i` of the result holds the logits for word `i + 1`.
pub fn multiway_decode(
    p: &ParamStore,
    cfg: &ModelConfig,
    prefix: &Tensor,
    memory: Option<&Tensor>,
) -> Result<Tensor> {
    linear(p, "dec.out", &decode_hidden(p, cfg, prefix, memory)?)
}

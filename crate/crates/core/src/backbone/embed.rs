use candle_core::Tensor;

use super::{ModelConfig, STEM_STRIDE};
use crate::data::{RawImage, TokenizedReport};
use crate::nn::{linear, max_pool_2x2, ParamStore};
use crate::{Error, Result};

/// Visual tokens of one sample: `views · grid²` rows of width `d`,
/// row-major over the grid within each view.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub grid: usize,
    pub views: usize,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.views * self.grid * self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of token `i` within its view.
    pub fn position(&self, i: usize) -> (usize, usize) {
        let j = i % (self.grid * self.grid);
        (j / self.grid, j % self.grid)
    }
}

fn image_tensor(p: &ParamStore, img: &RawImage) -> Result<Tensor> {
    Ok(Tensor::from_slice(
        &img.pixels,
        (1, img.channels, img.height, img.width),
        p.device(),
    )?
    .to_dtype(p.dtype())?)
}

/// Normalizes each feature map over all of (C, H, W), then applies a
/// per-channel gain and bias.
fn map_norm(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = p.get(&format!("{name}.g"))?.reshape((1, c, 1, 1))?;
    let b = p.get(&format!("{name}.b"))?.reshape((1, c, 1, 1))?;
    let flat = x.reshape((n, c * h * w))?;
    let xc = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
    let inv = (xc.sqr()?.mean_keepdim(1)? + 1e-5)?.sqrt()?.recip()?;
    let xn = xc.broadcast_mul(&inv)?.reshape((n, c, h, w))?;
    Ok(xn.broadcast_mul(&g)?.broadcast_add(&b)?)
}

/// Convolutional stem followed by the 1 × 1 projection to width `d`:
/// `grid² × d` token features without positional terms.
pub fn stem_features(p: &ParamStore, cfg: &ModelConfig, img: &RawImage) -> Result<Tensor> {
    let expected = cfg.image_size;
    if img.height != expected || img.width != expected || img.channels != 1 {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "1x{expected}x{expected} image ({g}x{g} grid)",
                g = cfg.patch_grid
            ),
            actual: format!(
                "{}x{}x{} image ({}x{} grid)",
                img.channels,
                img.height,
                img.width,
                img.height / STEM_STRIDE,
                img.width / STEM_STRIDE
            ),
        });
    }
    let mut x = image_tensor(p, img)?;
    for stage in 0..3 {
        let w = p.get(&format!("stem.{stage}.conv.w"))?;
        let b = p.get(&format!("stem.{stage}.conv.b"))?;
        let stride = if stage == 0 { 2 } else { 1 };
        x = x
            .conv2d(w, 1, stride, 1, 1)?
            .broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?;
        x = map_norm(p, &format!("stem.{stage}.ln"), &x)?;
        x = max_pool_2x2(&x.relu()?)?;
    }
    let (_, c, h, w) = x.dims4()?;
    let flat = x.reshape((c, h * w))?.t()?;
    linear(p, "stem.proj", &flat)
}

/// `pos_row[r] + pos_col[c] + view[v]` for every token of one view.
pub fn visual_positions(p: &ParamStore, cfg: &ModelConfig, view: usize) -> Result<Tensor> {
    let g = cfg.patch_grid;
    let rows = p.get("embed.pos_row")?;
    let cols = p.get("embed.pos_col")?;
    let grid = rows
        .unsqueeze(1)?
        .broadcast_add(&cols.unsqueeze(0)?)?
        .reshape((g * g, cfg.d))?;
    let v = p.get("embed.view")?.narrow(0, view, 1)?;
    Ok(grid.broadcast_add(&v)?)
}

/// Embeds one or two views; each view goes through the stem on its own and
/// the token sets are concatenated.
pub fn embed_image(p: &ParamStore, cfg: &ModelConfig, images: &[RawImage]) -> Result<PatchTokens> {
    let feats = images
        .iter()
        .map(|img| stem_features(p, cfg, img))
        .collect::<Result<Vec<_>>>()?;
    embed_features(p, cfg, &feats)
}

/// Adds positional terms to per-view stem features.
pub fn embed_features(p: &ParamStore, cfg: &ModelConfig, feats: &[Tensor]) -> Result<PatchTokens> {
    if feats.is_empty() || feats.len() > cfg.views {
        return Err(Error::invalid(format!(
            "{} views given, model accepts 1..={}",
            feats.len(),
            cfg.views
        )));
    }
    let rows = feats
        .iter()
        .enumerate()
        .map(|(v, f)| Ok(f.add(&visual_positions(p, cfg, v)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchTokens {
        tokens: Tensor::cat(&rows, 0)?,
        grid: cfg.patch_grid,
        views: feats.len(),
    })
}

/// Token embeddings plus learned 1-D positions starting at `start`.
pub fn embed_ids(p: &ParamStore, ids: &[u32], start: usize) -> Result<Tensor> {
    let table = p.get("embed.tokens")?;
    let pos = p.get("embed.pos_text")?;
    let (vocab, _) = table.dims2()?;
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} >= vocabulary size {vocab}"
        )));
    }
    if start + ids.len() > pos.dim(0)? {
        return Err(Error::invalid(format!(
            "{} positions from {start} exceed max_len {}",
            ids.len(),
            pos.dim(0)?
        )));
    }
    let idx = Tensor::from_slice(ids, ids.len(), p.device())?;
    Ok(table
        .index_select(&idx, 0)?
        .add(&pos.narrow(0, start, ids.len())?)?)
}

/// All `max_len` rows of a tokenized report, padding included.
pub fn embed_text(p: &ParamStore, report: &TokenizedReport) -> Result<Tensor> {
    embed_ids(p, &report.ids, 0)
}

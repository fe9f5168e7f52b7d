//! Pre-training objectives: prefix language modeling (PLM) and
//! degradation-aware masked image modeling (MIM).

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    embed_ids, embed_image, multiway_decode, multiway_encode, stem_features, visual_positions,
    ModelConfig,
};
use crate::data::{degrade_image, RawImage, TokenizedReport};
use crate::nn::{clip_grad_norm, cross_entropy, linear, mean_all, to_f64, AdamW, ParamStore};
use crate::{Error, Result};

pub(crate) fn register_params(
    p: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    p.add_linear("mim.head", cfg.d, cfg.d, rng)
}

/// Partition of the visual tokens into masked and visible positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1 for visible positions, 0 for masked ones.
    pub fn keep_vector(&self) -> Vec<f64> {
        let mut keep = vec![1.0; self.len()];
        for &i in &self.masked {
            keep[i] = 0.0;
        }
        keep
    }
}

/// Uniformly random subset of `round(ratio · n)` masked positions.
pub fn plan_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} on {n} tokens masks {k}: degenerate plan"
        )));
    }
    let mut masked = rand::seq::index::sample(rng, n, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        masked,
        visible,
        ratio,
    })
}

/// A report cut into a bidirectional prefix and a causally decoded target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSplit {
    pub prefix: Vec<u32>,
    pub target: Vec<u32>,
    pub n_p: usize,
}

pub fn split_at(report: &TokenizedReport, n_p: usize) -> Result<PrefixSplit> {
    let ids = report.active();
    if ids.len() < 3 {
        return Err(Error::invalid(format!(
            "report of length {} is too short",
            ids.len()
        )));
    }
    if n_p > ids.len() - 2 {
        return Err(Error::invalid(format!(
            "prefix length {n_p} leaves fewer than two target tokens of {}",
            ids.len()
        )));
    }
    Ok(PrefixSplit {
        prefix: ids[..n_p].to_vec(),
        target: ids[n_p..].to_vec(),
        n_p,
    })
}

/// Draws `n_p` uniformly from `0..=length − 2`.
pub fn split_prefix<R: Rng>(report: &TokenizedReport, rng: &mut R) -> Result<PrefixSplit> {
    if report.length < 3 {
        return Err(Error::invalid(format!(
            "report of length {} is too short",
            report.length
        )));
    }
    let n_p = rng.random_range(0..=report.length - 2);
    split_at(report, n_p)
}

/// Teacher-forced decoder layout for a split: `(input, start, labels)`.
///
/// The input is the report shifted right by one and placed at absolute
/// positions, as in report generation. `bos` is always given, never
/// predicted, so with an empty prefix the labels start after it.
pub fn plm_layout(split: &PrefixSplit) -> (Vec<u32>, usize, Vec<u32>) {
    let ids: Vec<u32> = split.prefix.iter().chain(&split.target).copied().collect();
    let s = split.n_p.max(1);
    (ids[s - 1..ids.len() - 1].to_vec(), s - 1, ids[s..].to_vec())
}

/// PLM loss: mean NLL of the target given `[image; prefix]` encoded
/// bidirectionally. Without images the visual block is dropped.
pub fn plm_loss(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: Option<&[RawImage]>,
    report: &TokenizedReport,
    n_p: usize,
) -> Result<Tensor> {
    let split = split_at(report, n_p)?;
    let logits = plm_logits(p, cfg, images, &split)?;
    cross_entropy(&logits, &plm_layout(&split).2)
}

pub fn plm_logits(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: Option<&[RawImage]>,
    split: &PrefixSplit,
) -> Result<Tensor> {
    let visual = images.map(|imgs| embed_image(p, cfg, imgs)).transpose()?;
    let text = if split.prefix.is_empty() {
        None
    } else {
        Some(embed_ids(p, &split.prefix, 0)?)
    };
    let memory = if visual.is_none() && text.is_none() {
        None
    } else {
        multiway_encode(p, cfg, visual.as_ref().map(|v| &v.tokens), text.as_ref())?.memory()?
    };
    let (ids, start, _) = plm_layout(split);
    let input = embed_ids(p, &ids, start)?;
    multiway_decode(p, cfg, &input, memory.as_ref())
}

/// Stem features of the undegraded views at every position, detached.
pub fn mim_targets(p: &ParamStore, cfg: &ModelConfig, images: &[RawImage]) -> Result<Tensor> {
    let feats = images
        .iter()
        .map(|img| Ok(stem_features(p, cfg, img)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&feats, 0)?)
}

/// MIM loss on the degraded views against the given targets
/// (`views · grid² × d`). Only masked rows of `targets` are read.
pub fn mim_loss_with_targets(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: &[RawImage],
    report: &TokenizedReport,
    plan: &MaskPlan,
    targets: &Tensor,
) -> Result<Tensor> {
    let n = images.len() * cfg.tokens_per_view();
    if plan.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("mask plan over {n} tokens"),
            actual: format!("{}", plan.len()),
        });
    }
    if images.is_empty() || images.len() > cfg.views {
        return Err(Error::invalid(format!("{} views given", images.len())));
    }
    let mut feats = Vec::with_capacity(images.len());
    let mut pos = Vec::with_capacity(images.len());
    for (v, img) in images.iter().enumerate() {
        let degraded = degrade_image(img, cfg.degrade_factor)?;
        feats.push(stem_features(p, cfg, &degraded)?);
        pos.push(visual_positions(p, cfg, v)?);
    }
    let feats = Tensor::cat(&feats, 0)?;
    let keep = Tensor::from_vec(plan.keep_vector(), (n, 1), p.device())?.to_dtype(p.dtype())?;
    let hide = (keep.ones_like()? - &keep)?;
    let mask_row = p.get("embed.mask")?.unsqueeze(0)?;
    let tokens = feats
        .broadcast_mul(&keep)?
        .add(&hide.broadcast_mul(&mask_row)?)?
        .add(&Tensor::cat(&pos, 0)?)?;
    let text = embed_ids(p, report.active(), 0)?;
    let enc = multiway_encode(p, cfg, Some(&tokens), Some(&text))?;
    let visual = enc.visual.expect("visual rows were supplied");
    let idx = Tensor::from_vec(
        plan.masked.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        plan.masked.len(),
        p.device(),
    )?;
    let pred = linear(p, "mim.head", &visual.index_select(&idx, 0)?)?;
    let target = targets.index_select(&idx, 0)?;
    masked_mse(&pred, &target)
}

/// Mean squared error over all entries of already-selected rows.
pub fn masked_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mean_all(&(pred - target)?.sqr()?)
}

/// MIM loss: reconstruct undegraded stem features at masked positions.
pub fn mim_loss(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: &[RawImage],
    report: &TokenizedReport,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let targets = mim_targets(p, cfg, images)?;
    mim_loss_with_targets(p, cfg, images, report, plan, &targets)
}

/// One pre-training example; `images` is `None` for text-only data.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub images: Option<Vec<RawImage>>,
    pub report: TokenizedReport,
}

/// One line of the pre-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_PLM")]
    pub l_plm: f64,
    #[serde(rename = "L_MIM")]
    pub l_mim: Option<f64>,
    pub lr: f64,
}

fn check_finite(term: &str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            step,
        })
    }
}

/// Loss terms of one batch without touching the parameters.
pub fn pretrain_losses(
    p: &ParamStore,
    cfg: &ModelConfig,
    batch: &[PretrainSample],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pre-training batch"));
    }
    let mut plm = Vec::with_capacity(batch.len());
    let mut mim = Vec::new();
    for s in batch {
        let split = split_prefix(&s.report, rng)?;
        plm.push(plm_loss(p, cfg, s.images.as_deref(), &s.report, split.n_p)?);
        if let Some(images) = &s.images {
            let plan = plan_mask(images.len() * cfg.tokens_per_view(), cfg.mask_ratio, rng)?;
            mim.push(mim_loss(p, cfg, images, &s.report, &plan)?);
        }
    }
    let mean = |v: &[Tensor]| -> Result<Tensor> {
        Ok((Tensor::stack(v, 0)?.sum_all()? / v.len() as f64)?)
    };
    let plm = mean(&plm)?;
    let mim = if mim.is_empty() {
        None
    } else {
        Some(mean(&mim)?)
    };
    Ok((plm, mim))
}

/// One optimizer update on `L_PLM + L_MIM`. `step` is the zero-based index of
/// this update, used for error reports and the log record.
pub fn pretrain_step(
    p: &ParamStore,
    cfg: &ModelConfig,
    batch: &[PretrainSample],
    opt: &mut AdamW,
    lr: f64,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let (plm, mim) = pretrain_losses(p, cfg, batch, rng)?;
    let l_plm = to_f64(&plm)?;
    check_finite("PLM", l_plm, step)?;
    let l_mim = mim.as_ref().map(to_f64).transpose()?;
    if let Some(v) = l_mim {
        check_finite("MIM", v, step)?;
    }
    let total = match &mim {
        Some(m) => (&plm + m)?,
        None => plm,
    };
    let mut grads = p.grads(&total.backward()?);
    if let Some(max) = opt.config.clip_norm {
        let norm = clip_grad_norm(&mut grads, max)?;
        check_finite("gradient", norm, step)?;
    }
    opt.step(p, &grads, lr)?;
    Ok(LossRecord {
        step,
        l_plm,
        l_mim,
        lr,
    })
}

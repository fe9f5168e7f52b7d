use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::causal::Mode;
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    /// Exponent `a` of the `|y|^a` length normalization.
    pub length_penalty: f64,
    /// Cap on the total sequence length, `bos` and `eos` included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Beam,
            beam_width: 3,
            length_penalty: 0.7,
            max_len: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Tiny,
}

/// Everything a run needs. Read from a flat TOML file; any key can be
/// overridden with `key=value` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub mode: Mode,
    pub decode: DecodeStrategy,
    pub beam_width: usize,
    pub length_penalty: f64,
    pub max_len: usize,
    /// Minimum training-split count for a word to enter the vocabulary.
    pub min_count: usize,
    pub model: Preset,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub k_local: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub views: Option<usize>,
    pub annotations: Option<PathBuf>,
    /// Root that image paths are resolved against; defaults to the
    /// directory of the annotation file.
    pub images: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Split used by `evaluate` and `generate`.
    pub split: String,
    /// Where `evaluate` writes its report record.
    pub report: Option<PathBuf>,
    /// Per-sample deconfounding dump written by `generate`.
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    /// Stage defaults: pre-training runs 30 epochs at peak 5e-4 with decay
    /// 1e-2 and 10 % warmup; fine-tuning runs 10 epochs of Adam at 1e-5 with
    /// decay 5e-5.
    pub fn defaults(stage: Stage) -> Self {
        let (epochs, batch_size, optimizer, lr, weight_decay, warmup_fraction) = match stage {
            Stage::Pretrain => (30, 4, OptimizerKind::AdamW, 5e-4, 1e-2, 0.1),
            Stage::Finetune => (10, 4, OptimizerKind::Adam, 1e-5, 5e-5, 0.0),
        };
        Self {
            stage,
            seed: 0,
            epochs,
            batch_size,
            optimizer,
            lr,
            weight_decay,
            warmup_fraction,
            clip_norm: 1.0,
            mode: Mode::Vlci,
            decode: DecodeStrategy::Beam,
            beam_width: 3,
            length_penalty: 0.7,
            max_len: 60,
            min_count: 3,
            model: Preset::Desk,
            d: None,
            heads: None,
            enc_layers: None,
            dec_layers: None,
            k_local: None,
            mask_ratio: None,
            views: None,
            annotations: None,
            images: None,
            checkpoint_in: None,
            checkpoint_out: None,
            log: None,
            split: "test".into(),
            report: None,
            trace: None,
        }
    }

    /// Parses a TOML document over the defaults of its `stage` (pre-training
    /// when absent), then applies `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            table.insert(key, value);
        }
        let stage = match table.get("stage") {
            None => Stage::Pretrain,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("invalid stage: {e}")))?,
        };
        let mut merged = toml::Table::try_from(Self::defaults(stage))
            .map_err(|e| Error::Config(e.to_string()))?;
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.annotations,
            &mut cfg.images,
            &mut cfg.checkpoint_in,
            &mut cfg.checkpoint_out,
            &mut cfg.log,
            &mut cfg.report,
            &mut cfg.trace,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "invalid lr {} / weight_decay {}",
                self.lr, self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            ));
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive".into());
        }
        if self.min_count == 0 {
            return bad("min_count must be at least 1".into());
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} < 3", self.max_len));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..OptimizerConfig::default()
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.decode,
            beam_width: self.beam_width,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
        }
    }

    /// Preset with the explicit overrides applied.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = match self.model {
            Preset::Paper => ModelConfig::paper(vocab_size),
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Tiny => ModelConfig::tiny(vocab_size),
        };
        m.max_len = self.max_len;
        if let Some(v) = self.d {
            m.d = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.enc_layers {
            m.enc_layers = v;
        }
        if let Some(v) = self.dec_layers {
            m.dec_layers = v;
        }
        if let Some(v) = self.k_local {
            m.k_local = v;
        }
        if let Some(v) = self.mask_ratio {
            m.mask_ratio = v;
        }
        if let Some(v) = self.views {
            m.views = v;
        }
        m.validate()?;
        Ok(m)
    }
}

fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{text}' is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

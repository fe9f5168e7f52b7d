use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::Stage;
use crate::backbone::{init_params, ModelConfig};
use crate::causal::Mode;
use crate::data::Vocabulary;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Name → (shape, row-major values).
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

const FORMAT: &str = "vlci-checkpoint-1";

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub stage: Stage,
    pub mode: Mode,
    /// Optimizer updates taken so far in `stage`.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: TensorMap,
    /// Adam moments, keys `m.{name}` / `v.{name}`.
    pub moments: TensorMap,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Writes a safetensors archive: parameters under `param/`, optimizer
    /// moments under `opt/`, everything else as JSON metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(k, v)| (format!("param/{k}"), v))
            .chain(self.moments.iter().map(|(k, v)| (format!("opt/{k}"), v)))
            .map(|(k, (shape, vals))| {
                let raw = vals.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k, shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("model".into(), serde_json::to_string(&self.model)?),
            ("vocab".into(), self.vocab.to_json()),
            ("stage".into(), serde_json::to_string(&self.stage)?),
            ("mode".into(), serde_json::to_string(&self.mode)?),
            ("step".into(), self.step.to_string()),
            ("rng".into(), serde_json::to_string(&self.rng)?),
        ]);
        let buf = safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| bad("metadata record missing"))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| bad(format!("metadata '{k}' missing")))
        };
        if field("format")? != FORMAT {
            return Err(bad(format!("unknown format '{}'", field("format")?)));
        }
        let model: ModelConfig = serde_json::from_str(field("model")?)?;
        model.validate()?;
        let vocab = Vocabulary::from_json(field("vocab")?)?;
        if vocab.len() != model.vocab_size {
            return Err(bad(format!(
                "vocabulary of {} words for a model with {} rows",
                vocab.len(),
                model.vocab_size
            )));
        }
        let step = field("step")?
            .parse()
            .map_err(|_| bad("step is not an integer"))?;
        let st = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
        let mut params = TensorMap::new();
        let mut moments = TensorMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("'{name}' is {:?}, expected F32", view.dtype())));
            }
            let vals = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let entry = (view.shape().to_vec(), vals);
            if let Some(k) = name.strip_prefix("param/") {
                params.insert(k.to_string(), entry);
            } else if let Some(k) = name.strip_prefix("opt/") {
                moments.insert(k.to_string(), entry);
            } else {
                return Err(bad(format!("unexpected tensor '{name}'")));
            }
        }
        Ok(Self {
            model,
            vocab,
            stage: serde_json::from_str(field("stage")?)?,
            mode: serde_json::from_str(field("mode")?)?,
            step,
            rng: serde_json::from_str(field("rng")?)?,
            params,
            moments,
        })
    }

    /// A parameter store for `self.model` holding the saved values. Every
    /// expected name must be present with its shape, and nothing else.
    pub fn param_store(&self, dtype: DType) -> Result<ParamStore> {
        let p = init_params(&self.model, 0, dtype)?;
        p.load_f32_map(&self.params)
            .map_err(|e| bad(format!("parameters do not match the model: {e}")))?;
        Ok(p)
    }
}

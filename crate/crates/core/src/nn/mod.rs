//! Minimal neural-network toolkit over `candle-core`: a named parameter
//! store, the handful of layers the model needs, AdamW with a
//! warmup-cosine schedule, and a safetensors checkpoint format.

mod layers;
mod optim;
mod params;

pub use layers::{
    attend, causal_mask, cross_entropy, ffn, gelu, layer_norm, linear, log_softmax_last,
    max_pool_2x2, mha, softmax_last, AttnMask, Heads,
};
pub(crate) use layers::{mean_all, mha_biased};
pub use optim::{clip_grad_norm, AdamW, LrSchedule, OptimizerConfig, OptimizerKind};
pub use params::{GradMap, Init, ParamStore, EMBED_STD};

use candle_core::{DType, Device, Tensor};

use crate::Result;

/// Scalar constant in the dtype of `like`.
pub fn scalar_like(like: &Tensor, v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?)
}

/// Row-major `rows × cols` matrix from `f64` values.
pub fn matrix(values: &[f64], rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Copies a 2-D tensor out as `f64` rows.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Copies a scalar tensor out as `f64`.
pub fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

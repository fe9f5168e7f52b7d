use candle_core::{DType, Tensor};

use crate::backbone::AttentionTrace;
use crate::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-5;

/// Attention rollout per head: the product over layers of `(A + I) / 2`,
/// each factor row-normalized, scored by column mean. Returns `heads × N`.
pub fn accumulate_attention(trace: &AttentionTrace) -> Result<Vec<Vec<f64>>> {
    let first = trace
        .layers
        .first()
        .ok_or_else(|| Error::invalid("empty attention trace"))?;
    let (heads, n, _) = first.dims3()?;
    let eye = Tensor::eye(n, DType::F64, first.device())?.unsqueeze(0)?;
    let mut rolled: Option<Tensor> = None;
    for (l, a) in trace.layers.iter().enumerate() {
        let a = a.to_dtype(DType::F64)?;
        if a.dims3()? != (heads, n, n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{heads}x{n}x{n}"),
                actual: format!("{:?} at layer {l}", a.dims()),
            });
        }
        check_stochastic(&a, l)?;
        let mixed = (a.broadcast_add(&eye)? * 0.5)?;
        let mixed = mixed.broadcast_div(&mixed.sum_keepdim(2)?)?;
        rolled = Some(match rolled {
            None => mixed,
            Some(r) => mixed.matmul(&r)?,
        });
    }
    let rolled = rolled.expect("trace is non-empty");
    Ok(rolled.mean(1)?.to_vec2::<f64>()?)
}

fn check_stochastic(a: &Tensor, layer: usize) -> Result<()> {
    for (h, rows) in a.to_vec3::<f64>()?.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::NotStochastic(format!(
                    "layer {layer}, head {h}, row {i} sums to {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Per head, the `k` highest scores; ties go to the lower index. Heads are
/// concatenated in order and may select the same token.
pub fn local_indices(scores: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(k * scores.len());
    for (h, row) in scores.iter().enumerate() {
        if k > row.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds {} tokens for head {h}",
                row.len()
            )));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        out.extend_from_slice(&order[..k]);
    }
    Ok(out)
}

/// Locally sampled visual tokens and the positions they came from.
#[derive(Debug, Clone)]
pub struct LocalTokens {
    pub tokens: Tensor,
    pub indices: Vec<usize>,
}

impl LocalTokens {
    pub fn gather(h_v: &Tensor, indices: &[usize]) -> Result<Self> {
        let n = h_v.dim(0)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("token index {bad} >= {n}")));
        }
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            h_v.device(),
        )?;
        Ok(Self {
            tokens: h_v.index_select(&idx, 0)?,
            indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn local_sample(h_v: &Tensor, scores: &[Vec<f64>], k: usize) -> Result<LocalTokens> {
    LocalTokens::gather(h_v, &local_indices(scores, k)?)
}

use candle_core::{DType, Tensor, D};

use super::ParamStore;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// `x · W + b` with `W` stored as `(in, out)` under `{name}.w` / `{name}.b`.
pub fn linear(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.broadcast_add(b)?)
}

/// 2 × 2 max pooling with stride 2 over `(n, c, h, w)`. Written as a
/// reshape and two reductions so that the maximum receives the full
/// upstream gradient.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Layer norm over the last axis with gain `{name}.g` and bias `{name}.b`.
pub fn layer_norm(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let inv = (var + LN_EPS)?.sqrt()?.recip()?;
    Ok(xc.broadcast_mul(&inv)?.broadcast_mul(g)?.broadcast_add(b)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
pub fn ffn(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = gelu(&linear(p, &format!("{name}.fc1"), x)?)?;
    linear(p, &format!("{name}.fc2"), &h)
}

/// Softmax over the last axis; the shift by the row maximum is treated as a
/// constant, which leaves values and gradients unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Boolean admissibility matrix, `allowed[i][j]` = query `i` may see key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} mask"),
                actual: format!("{} entries", allowed.len()),
            });
        }
        if let Some(row) =
            (0..rows).find(|&i| !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a))
        {
            return Err(Error::FullyMasked { row });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Key-padding mask: every query sees exactly the valid keys.
    pub fn keys(rows: usize, valid: &[bool]) -> Result<Self> {
        let cols = valid.len();
        Self::new(
            rows,
            cols,
            (0..rows).flat_map(|_| valid.iter().copied()).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn additive(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f64> = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED })
            .collect();
        super::matrix(&v, self.rows, self.cols, dtype)
    }
}

/// Position `i` sees keys `0..=i`.
pub fn causal_mask(n: usize) -> AttnMask {
    let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
    AttnMask {
        rows: n,
        cols: n,
        allowed,
    }
}

/// Head split of a width-`d` feature axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads(pub usize);

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    Ok(x.reshape((l, heads, d / heads))?
        .transpose(0, 1)?
        .contiguous()?)
}

/// Scaled dot-product attention on already-projected `q`, `k`, `v`
/// (`Lq × d`, `Lk × d`, `Lk × d`). Returns the head-concatenated output
/// `Lq × d` and the weights `heads × Lq × Lk`. `bias` is an optional additive
/// logit term of shape `heads × Lq × Lk`.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
    heads: Heads,
) -> Result<(Tensor, Tensor)> {
    let (lq, d) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    if d != dk || d % heads.0 != 0 || v.dims2()? != (lk, d) {
        return Err(Error::ShapeMismatch {
            expected: format!("q/k/v of width {d} divisible by {} heads", heads.0),
            actual: format!("q {:?}, k {:?}, v {:?}", q.dims(), k.dims(), v.dims()),
        });
    }
    let dh = d / heads.0;
    let qh = split_heads(q, heads.0)?;
    let kh = split_heads(k, heads.0)?;
    let vh = split_heads(v, heads.0)?;
    let mut logits = (qh.matmul(&kh.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    if let Some(b) = bias {
        logits = (logits + b)?;
    }
    if let Some(m) = mask {
        if (m.rows, m.cols) != (lq, lk) {
            return Err(Error::ShapeMismatch {
                expected: format!("{lq}x{lk} mask"),
                actual: format!("{}x{}", m.rows, m.cols),
            });
        }
        logits = logits.broadcast_add(&m.additive(q.dtype())?)?;
    }
    let w = softmax_last(&logits)?;
    let out = w.matmul(&vh)?.transpose(0, 1)?.reshape((lq, d))?;
    Ok((out, w))
}

/// Multi-head attention with projections `{name}.{q,k,v,o}`.
pub fn mha(
    p: &ParamStore,
    name: &str,
    query: &Tensor,
    memory: &Tensor,
    mask: Option<&AttnMask>,
    heads: Heads,
) -> Result<(Tensor, Tensor)> {
    mha_biased(p, name, query, memory, mask, None, heads)
}

pub(crate) fn mha_biased(
    p: &ParamStore,
    name: &str,
    query: &Tensor,
    memory: &Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
    heads: Heads,
) -> Result<(Tensor, Tensor)> {
    let q = linear(p, &format!("{name}.q"), query)?;
    let k = linear(p, &format!("{name}.k"), memory)?;
    let v = linear(p, &format!("{name}.v"), memory)?;
    let (o, w) = attend(&q, &k, &v, mask, bias, heads)?;
    Ok((linear(p, &format!("{name}.o"), &o)?, w))
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean negative log-likelihood of `targets` under `logits` (`L × V`).
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (l, v) = logits.dims2()?;
    if l != targets.len() || l == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} target ids", l),
            actual: format!("{}", targets.len()),
        });
    }
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid(format!(
            "target id {bad} >= vocabulary size {v}"
        )));
    }
    let idx = Tensor::from_slice(targets, (l, 1), logits.device())?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok((mean_all(&picked)? * -1.0)?)
}

/// Mean of a loss-like tensor as a scalar in its own dtype.
pub(crate) fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.elem_count() as f64;
    Ok((x.sum_all()? / n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{matrix, to_rows};

    fn m(v: &[f64], r: usize, c: usize) -> Tensor {
        matrix(v, r, c, DType::F64).unwrap()
    }

    #[test]
    fn single_key_copies_value() {
        let q = m(&[0.3, -1.0], 1, 2);
        let k = m(&[2.0, 5.0], 1, 2);
        let v = m(&[7.0, -3.0], 1, 2);
        let (o, w) = attend(&q, &k, &v, None, None, Heads(1)).unwrap();
        assert_eq!(to_rows(&o).unwrap(), vec![vec![7.0, -3.0]]);
        assert_eq!(
            w.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn zero_logits_are_uniform() {
        let q = m(&[0.0, 0.0], 1, 2);
        let k = m(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let v = m(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let (_, w) = attend(&q, &k, &v, None, None, Heads(1)).unwrap();
        assert_eq!(
            w.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn dominant_logit_saturates() {
        // with d = 1 the scaling is 1, so the logits are q·k exactly
        let q = m(&[1.0], 1, 1);
        let k = m(&[1e4, 0.0, 0.0], 3, 1);
        let v = m(&[1.0, 2.0, 3.0], 3, 1);
        let (_, w) = attend(&q, &k, &v, None, None, Heads(1)).unwrap();
        let w = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((1.0 - w[0]).abs() < 1e-6);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        assert!(matches!(
            AttnMask::new(2, 2, vec![true, false, false, false]),
            Err(Error::FullyMasked { row: 1 })
        ));
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let q = m(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let k = m(&[1.0, 0.0, 0.0, 1.0, 5.0, 5.0], 3, 2);
        let v = m(&[1.0, 0.0, 0.0, 1.0, 9.0, 9.0], 3, 2);
        let mask = AttnMask::keys(2, &[true, true, false]).unwrap();
        let (_, w) = attend(&q, &k, &v, Some(&mask), None, Heads(2)).unwrap();
        for h in w.to_vec3::<f64>().unwrap() {
            for row in h {
                assert_eq!(row[2], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = m(&[0.0, 0.0, 1e4, 0.0], 2, 2);
        let ce = cross_entropy(&logits, &[0, 1]).unwrap();
        let v = ce.to_scalar::<f64>().unwrap();
        // row 0: ln 2; row 1: 1e4 + ln(1 + e^-1e4)
        assert!((v - (2f64.ln() + 1e4) / 2.0).abs() < 1e-9);
        let right = cross_entropy(&logits, &[1, 0])
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((right - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let c = causal_mask(3);
        assert!(c.allowed(2, 0) && c.allowed(1, 1) && !c.allowed(0, 1));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut p = ParamStore::new(DType::F64);
        p.insert(
            "ln.g",
            Tensor::ones(4, DType::F64, &candle_core::Device::Cpu).unwrap(),
        )
        .unwrap();
        p.insert(
            "ln.b",
            Tensor::zeros(4, DType::F64, &candle_core::Device::Cpu).unwrap(),
        )
        .unwrap();
        let y = layer_norm(&p, "ln", &m(&[1.0, 2.0, 3.0, 4.0], 1, 4)).unwrap();
        let y = &to_rows(&y).unwrap()[0];
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-12);
    }
}

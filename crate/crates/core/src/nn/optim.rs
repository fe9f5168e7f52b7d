use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{GradMap, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decoupled weight decay, applied to matrices only.
    AdamW,
    /// Classic L2 penalty folded into the gradient.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 5e-4,
            weight_decay: 1e-2,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Linear warmup to `peak`, then half-cosine down to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: f64,
    pub total_steps: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: warmup_fraction * total_steps as f64,
            total_steps: total_steps as f64,
        }
    }

    pub fn lr(&self, step: f64) -> f64 {
        let step = step.clamp(0.0, self.total_steps);
        if step < self.warmup_steps {
            return self.peak * step / self.warmup_steps;
        }
        let span = self.total_steps - self.warmup_steps;
        if span <= 0.0 {
            return self.peak;
        }
        let progress = (step - self.warmup_steps) / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// Adam-family optimizer with per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

fn decays(t: &Tensor) -> bool {
    t.rank() >= 2
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let w = var.as_detached_tensor();
            let decay = c.weight_decay > 0.0 && decays(&w);
            let g = if decay && c.kind == OptimizerKind::Adam {
                (g + (&w * c.weight_decay)?)?
            } else {
                g.clone()
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (w.zeros_like()?, w.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut next = (&w - (update * lr)?)?;
            if decay && c.kind == OptimizerKind::AdamW {
                next = (next - (&w * (lr * c.weight_decay))?)?;
            }
            var.set(&next)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }

    /// Moments as `f32` buffers, keys `m.{name}` and `v.{name}`.
    pub fn state_map(&self) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = HashMap::new();
        for (name, (m, v)) in &self.moments {
            for (tag, t) in [("m", m), ("v", v)] {
                let vals = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                out.insert(format!("{tag}.{name}"), (t.dims().to_vec(), vals));
            }
        }
        Ok(out)
    }

    pub fn load_state(
        &mut self,
        step: u64,
        map: &HashMap<String, (Vec<usize>, Vec<f32>)>,
        params: &ParamStore,
    ) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (key, (shape, vals)) in map {
            let Some(name) = key.strip_prefix("m.") else {
                continue;
            };
            let (vshape, vvals) = map
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("second moment of '{name}' missing")))?;
            let expected = params.get(name)?.dims().to_vec();
            if shape != &expected || vshape != &expected {
                return Err(Error::Checkpoint(format!(
                    "moment shape mismatch for '{name}'"
                )));
            }
            let mk = |v: &[f32]| -> Result<Tensor> {
                Ok(Tensor::from_slice(v, expected.as_slice(), params.device())?
                    .to_dtype(params.dtype())?)
            };
            moments.insert(name.to_string(), (mk(vals)?, mk(vvals)?));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_peaks_at_warmup_and_ends_at_zero() {
        let s = LrSchedule::new(5e-4, 0.1, 100);
        assert_eq!(s.lr(0.0), 0.0);
        assert!((s.lr(10.0) - 5e-4).abs() < 1e-18);
        assert!(s.lr(100.0).abs() < 1e-18);
        assert!(s.lr(9.0) < s.lr(10.0) && s.lr(11.0) < s.lr(10.0));
        // continuity at the warmup boundary
        assert!((s.lr(10.0 - 1e-9) - s.lr(10.0 + 1e-9)).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first Adam step is lr·sign(g)
        let mut p = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init("b", &[3], Init::Zeros, &mut rng).unwrap();
        let g = Tensor::new(&[2.0f64, -0.5, 0.0], p.device()).unwrap();
        let grads: GradMap = [("b".to_string(), g)].into_iter().collect();
        let mut opt = AdamW::new(OptimizerConfig::default());
        opt.step(&p, &grads, 0.1).unwrap();
        let w = p.get("b").unwrap().to_vec1::<f64>().unwrap();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6 && w[2] == 0.0);
    }

    #[test]
    fn decoupled_decay_skips_vectors() {
        let mut p = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init("w", &[1, 1], Init::Ones, &mut rng).unwrap();
        p.init("b", &[1], Init::Ones, &mut rng).unwrap();
        let grads: GradMap = [
            (
                "w".to_string(),
                Tensor::zeros((1, 1), DType::F64, p.device()).unwrap(),
            ),
            (
                "b".to_string(),
                Tensor::zeros(1, DType::F64, p.device()).unwrap(),
            ),
        ]
        .into_iter()
        .collect();
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&p, &grads, 0.1).unwrap();
        let w = p
            .get("w")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        let b = p.get("b").unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((w - 0.95).abs() < 1e-12);
        assert_eq!(b, 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads: GradMap = [(
            "a".to_string(),
            Tensor::new(&[3.0f64, 4.0], &candle_core::Device::Cpu).unwrap(),
        )]
        .into_iter()
        .collect();
        let before = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert_eq!(before, 5.0);
        let g = grads["a"].to_vec1::<f64>().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}

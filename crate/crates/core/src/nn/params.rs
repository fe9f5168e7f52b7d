use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Initialisation rule for a fresh parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
}

/// Standard deviation of embedding tables.
pub const EMBED_STD: f64 = 1.0;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Named trainable tensors. Names are unique and ordered, which fixes the
/// iteration order used by the optimizer and the checkpoint writer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    /// Draws a new parameter. Values are sampled in `f64` so that stores of
    /// different dtypes built from the same seed agree up to rounding.
    pub fn init<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => normal(n, std, rng),
            Init::Kaiming(fan_in) => normal(n, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    /// `{name}.w` of shape `(fan_in, fan_out)` with std `1/√fan_in`, zero bias `{name}.b`.
    pub fn add_linear<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.init(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            Init::Normal((1.0 / fan_in.max(1) as f64).sqrt()),
            rng,
        )?;
        self.init(&format!("{name}.b"), &[fan_out], Init::Zeros, rng)
    }

    /// Unit gain `{name}.g`, zero bias `{name}.b`.
    pub fn add_layer_norm<R: Rng>(&mut self, name: &str, width: usize, rng: &mut R) -> Result<()> {
        self.init(&format!("{name}.g"), &[width], Init::Ones, rng)?;
        self.init(&format!("{name}.b"), &[width], Init::Zeros, rng)
    }

    pub fn add_ffn<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.add_linear(&format!("{name}.fc1"), fan_in, hidden, rng)?;
        self.add_linear(&format!("{name}.fc2"), hidden, fan_out, rng)
    }

    /// Query, key, value and output projections of width `d`.
    pub fn add_mha<R: Rng>(&mut self, name: &str, d: usize, rng: &mut R) -> Result<()> {
        for proj in ["q", "k", "v", "o"] {
            self.add_linear(&format!("{name}.{proj}"), d, d, rng)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        let t = t.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Shares storage with the variable; a later `set` is visible through it.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.var(name)?.as_tensor())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{name} {:?}", var.dims()),
                actual: format!("{:?}", value.dims()),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy into fresh variables, optionally changing dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (name, var) in &self.vars {
            out.insert(name, var.as_detached_tensor().to_dtype(dtype)?.copy()?)?;
        }
        Ok(out)
    }

    /// Pulls the gradient of every parameter out of a backward pass.
    /// Parameters that did not take part in the graph are absent. The
    /// returned tensors are detached from the backward graph.
    pub fn grads(&self, store: &candle_core::backprop::GradStore) -> GradMap {
        self.vars
            .iter()
            .filter_map(|(name, var)| {
                store
                    .get(var.as_tensor())
                    .map(|g| (name.clone(), g.detach()))
            })
            .collect()
    }

    /// Snapshot as `f32` buffers keyed by name.
    pub fn to_f32_map(&self) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = HashMap::new();
        for (name, var) in &self.vars {
            let t = var.as_detached_tensor();
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.insert(name.clone(), (t.dims().to_vec(), values));
        }
        Ok(out)
    }

    /// Overwrites every parameter from a name → buffer map. Every name must
    /// be present with the expected shape; extra names are rejected.
    pub fn load_f32_map(&self, map: &HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, values) = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}': expected shape {:?}, found {:?}",
                    var.dims(),
                    shape
                )));
            }
            let t = Tensor::from_slice(values, shape.as_slice(), &Device::Cpu)?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = map.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }

    /// True when every element of every parameter is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for var in self.vars.values() {
            let s = var
                .as_detached_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            if s.iter().any(|v| !v.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn normal<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init("a", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(p.init("a", &[2, 2], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn map_round_trip_checks_shapes() {
        let mut p = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init("w", &[3, 2], Init::Normal(1.0), &mut rng).unwrap();
        let map = p.to_f32_map().unwrap();
        let mut q = ParamStore::new(DType::F32);
        q.init("w", &[3, 2], Init::Zeros, &mut rng).unwrap();
        q.load_f32_map(&map).unwrap();
        assert_eq!(q.to_f32_map().unwrap(), map);

        let mut r = ParamStore::new(DType::F32);
        r.init("w", &[2, 3], Init::Zeros, &mut rng).unwrap();
        assert!(r.load_f32_map(&map).is_err());
    }

    #[test]
    fn set_writes_through_shared_storage() {
        let mut p = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init("b", &[2], Init::Zeros, &mut rng).unwrap();
        let alias = p.get("b").unwrap().clone();
        p.set("b", &Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(alias.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
    }
}

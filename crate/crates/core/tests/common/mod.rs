#![allow(dead_code)]

pub mod reference;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlci_core::backbone::{init_params, ModelConfig};
use vlci_core::data::{RawImage, TokenizedReport, BOS, EOS, PAD};
use vlci_core::nn::ParamStore;

pub fn image(size: usize, seed: u64) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..size * size).map(|_| rng.random::<f32>()).collect();
    RawImage::new(1, size, size, px).unwrap()
}

pub fn report(words: &[u32], max_len: usize) -> TokenizedReport {
    let mut ids = vec![BOS];
    ids.extend_from_slice(words);
    ids.push(EOS);
    let length = ids.len();
    ids.resize(max_len, PAD);
    TokenizedReport { ids, length }
}

/// d = 8, one encoder and one decoder layer, double precision.
pub fn tiny(seed: u64) -> (ModelConfig, ParamStore) {
    let mut cfg = ModelConfig::tiny(12);
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    let p = init_params(&cfg, seed, DType::F64).unwrap();
    (cfg, p)
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Central differences at random coordinates until `count` of them carry a
/// gradient of magnitude at least `floor`. Coordinates below the floor are
/// returned separately; their absolute error is what matters there.
pub fn grad_check<F>(
    p: &ParamStore,
    loss: F,
    count: usize,
    floor: f64,
    seed: u64,
) -> (Vec<Probe>, Vec<Probe>)
where
    F: Fn(&ParamStore) -> Tensor,
{
    let l = loss(p);
    let grads = p.grads(&l.backward().unwrap());
    let names: Vec<String> = p.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let (mut big, mut small) = (Vec::new(), Vec::new());
    let mut tries = 0;
    while big.len() < count {
        tries += 1;
        assert!(tries < 5000, "too few coordinates with a gradient");
        let name = &names[rng.random_range(0..names.len())];
        let orig = p.get(name).unwrap().copy().unwrap();
        let shape = orig.dims().to_vec();
        let flat = orig.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let index = rng.random_range(0..flat.len());
        let analytic = grads
            .get(name)
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index])
            .unwrap_or(0.0);
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[index] += delta;
            p.set(
                name,
                &Tensor::from_vec(v, shape.as_slice(), p.device()).unwrap(),
            )
            .unwrap();
            scalar(&loss(p))
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        p.set(name, &orig).unwrap();
        let probe = Probe {
            name: name.clone(),
            index,
            analytic,
            numeric,
        };
        if analytic.abs().max(numeric.abs()) >= floor {
            big.push(probe);
        } else {
            small.push(probe);
        }
    }
    (big, small)
}

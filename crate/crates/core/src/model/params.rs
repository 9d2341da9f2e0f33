//! Named parameter storage with seeded, order-independent initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform bound computed from the fan-in.
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Parameters keyed by hierarchical dotted names
/// (`object.backbone.stage1.block0.conv1.weight`).
///
/// Each parameter's initial values depend only on the store seed and the
/// parameter name, so two models that share a sub-network name also share
/// its initialization regardless of construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = self.rng_for(name);
        let values: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter counts grouped by the first two name components
    /// (`object.backbone`, `attribute.color`, ...).
    pub fn component_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            let key: Vec<&str> = k.split('.').take(2).collect();
            *out.entry(key.join(".")).or_insert(0) += v.elem_count();
        }
        out
    }

    /// Copies values from `tensors` into existing parameters. Every parameter
    /// must be present with the same shape.
    pub fn load_from(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let t = tensors
                .get(k)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing parameter {k}")))?;
            if t.dims() != v.dims() {
                return Err(crate::Error::Checkpoint(format!(
                    "shape mismatch for {k}: checkpoint {:?}, model {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(crate::Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

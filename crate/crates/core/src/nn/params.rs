use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DEVICE;
use crate::error::{Error, Result};

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Const(f64),
}

enum Mode {
    /// Fresh trainable parameters drawn from a seeded generator.
    Create(ChaCha8Rng),
    /// Parameters taken from an existing tensor map.
    Load(BTreeMap<String, Tensor>),
}

/// Named parameter registry.
///
/// The crate never relies on candle's global RNG: every parameter is drawn
/// from a seeded ChaCha stream so that training runs are reproducible.
pub struct ParamStore {
    mode: Mode,
    dtype: DType,
    prefix: Vec<String>,
    vars: BTreeMap<String, Var>,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self {
            mode: Mode::Create(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            prefix: Vec::new(),
            vars: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// A store that hands out the supplied tensors, detached from any graph.
    pub fn frozen(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Self {
        Self {
            mode: Mode::Load(tensors),
            dtype,
            prefix: Vec::new(),
            vars: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.tensors.contains_key(&full) {
            return Err(Error::Checkpoint(format!("duplicate parameter {full}")));
        }
        let numel: usize = shape.iter().product();
        let tensor = match &mut self.mode {
            Mode::Create(rng) => {
                let data: Vec<f64> = match init {
                    Init::Const(c) => vec![c; numel],
                    Init::Kaiming { fan_in, gain } => {
                        let std = gain / (fan_in.max(1) as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("valid std");
                        (0..numel).map(|_| normal.sample(rng)).collect()
                    }
                };
                let t = Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(self.dtype)?;
                let var = Var::from_tensor(&t)?;
                let t = var.as_tensor().clone();
                self.vars.insert(full.clone(), var);
                t
            }
            Mode::Load(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full}: expected shape {shape:?}, found {:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.detach()
            }
        };
        self.tensors.insert(full, tensor.clone());
        Ok(tensor)
    }

    /// Trainable variables in name order (empty for frozen stores).
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Current parameter values, detached.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        match self.vars.is_empty() {
            false => self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
                .collect(),
            true => self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }
}

//! Named-tensor containers.
//!
//! [`ParameterSet`] is the plain-data unit of checkpointing, merging and
//! expansion. [`ParamStore`] wraps the same names around trainable
//! [`candle_core::Var`]s for the models.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::Single => DType::F32,
            Precision::Double => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Builds data of the same dtype as `self` from f64 values.
    pub fn like(&self, values: Vec<f64>) -> TensorData {
        match self {
            TensorData::F32(_) => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            TensorData::F64(_) => TensorData::F64(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "elements",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1::<f64>()?),
            _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Self::new(shape, data)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = match &self.data {
            TensorData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            TensorData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
        };
        Ok(t.to_dtype(dtype)?)
    }
}

/// Ordered map from tensor name to tensor, plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: NamedTensor) -> Option<NamedTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NamedTensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(NamedTensor::numel).sum()
    }

    /// Sub-set of tensors whose names start with `prefix`.
    pub fn partition(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }
}

impl FromIterator<(String, NamedTensor)> for ParameterSet {
    fn from_iter<I: IntoIterator<Item = (String, NamedTensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Trainable parameters keyed by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.insert(name.into(), var);
        Ok(())
    }

    pub fn normal(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = randn(rng, shape, self.dtype, &self.device)?.affine(std, 0.0)?;
        self.insert_tensor(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert_tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.constant(name, shape, 0.0)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with freshly allocated vars; updates to one never reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (k, v) in &self.vars {
            out.insert_tensor(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn to_parameter_set(&self) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for (k, v) in &self.vars {
            ps.insert(k.clone(), NamedTensor::from_tensor(v.as_tensor())?);
        }
        Ok(ps)
    }

    pub fn from_parameter_set(ps: &ParameterSet, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (k, t) in ps.iter() {
            let tensor = t.to_tensor(dtype, &out.device)?;
            out.insert_tensor(k.clone(), tensor)?;
        }
        Ok(out)
    }

    /// Replaces the value of `name` in place.
    pub fn set(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        var.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Uniform tensor in `[lo, hi)` drawn from `rng`.
pub fn rand_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

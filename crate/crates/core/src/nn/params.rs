use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Initialization recipe for a freshly created parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Const(f64),
    Uniform {
        lo: f64,
        hi: f64,
    },
    Normal {
        mean: f64,
        std: f64,
    },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the torch default for conv and linear layers.
    FanInUniform {
        fan_in: usize,
    },
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub var: Option<Var>,
    pub kind: ParamKind,
}

/// Ordered collection of named parameters belonging to one network.
///
/// A store is either trainable (every entry backed by a [`Var`]) or frozen
/// (plain tensors that never take part in gradient tracking).
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.entries.values().all(|e| e.var.is_none())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Trainable variables in registration order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Weight)
            .filter_map(|(k, e)| e.var.as_ref().map(|v| (k.as_str(), v)))
            .collect()
    }

    /// Number of scalar weights, buffers excluded.
    pub fn weight_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.elem_count())
            .sum()
    }

    /// Detached deep copies of every entry.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.tensor.detach().copy()?)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor.detach()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f64 values, in registration order.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, e) in &self.entries {
            hasher.update(name.as_bytes());
            for d in e.tensor.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = e.tensor.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mutable running statistic. Only trainable stores can update it.
#[derive(Debug, Clone)]
pub struct Buffer {
    tensor: Tensor,
    var: Option<Var>,
}

impl Buffer {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn is_mutable(&self) -> bool {
        self.var.is_some()
    }

    pub fn update(&self, value: &Tensor) -> Result<()> {
        if let Some(var) = &self.var {
            var.set(&value.detach().contiguous()?)?;
        }
        Ok(())
    }
}

enum Source {
    Init(Box<Rng>),
    Load(HashMap<String, Tensor>),
    Frozen(HashMap<String, Tensor>),
}

struct BuilderState {
    source: Source,
    entries: IndexMap<String, ParamEntry>,
    dtype: DType,
    device: Device,
}

/// Hands out named parameters while a network is being constructed.
///
/// Mirrors the `VarBuilder::pp` idiom but owns the RNG so initialization is
/// reproducible on CPU, and can rebuild a network from frozen tensors.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    fn with_source(source: Source, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                source,
                entries: IndexMap::new(),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn init(rng: Rng, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Init(Box::new(rng)), dtype, device)
    }

    /// Trainable parameters seeded from existing tensors.
    pub fn load(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Load(tensors), dtype, device)
    }

    /// Read-only parameters; the resulting network never accumulates gradients.
    pub fn frozen(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Frozen(tensors), dtype, device)
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn entry(&self, name: &str, shape: Shape, init: Init, kind: ParamKind) -> Result<ParamEntry> {
        let full = self.full_name(name);
        let mut state = self.state.borrow_mut();
        if state.entries.contains_key(&full) {
            return Err(Error::ParamMismatch(format!("parameter {full} registered twice")));
        }
        let dtype = state.dtype;
        let device = state.device.clone();
        let fetch = |map: &mut HashMap<String, Tensor>| -> Result<Tensor> {
            let t = map
                .remove(&full)
                .ok_or_else(|| Error::ParamMismatch(format!("missing tensor {full}")))?;
            if t.shape() != &shape {
                return Err(Error::ParamMismatch(format!(
                    "tensor {full} has shape {:?}, expected {:?}",
                    t.dims(),
                    shape.dims()
                )));
            }
            Ok(t.to_device(&device)?.to_dtype(dtype)?)
        };
        let entry = match &mut state.source {
            Source::Init(rng) => {
                let t = generate(rng, &shape, &init, dtype, &device)?;
                let var = Var::from_tensor(&t)?;
                ParamEntry {
                    tensor: var.as_tensor().clone(),
                    var: Some(var),
                    kind,
                }
            }
            Source::Load(map) => {
                let var = Var::from_tensor(&fetch(map)?.copy()?)?;
                ParamEntry {
                    tensor: var.as_tensor().clone(),
                    var: Some(var),
                    kind,
                }
            }
            Source::Frozen(map) => ParamEntry {
                tensor: fetch(map)?.detach(),
                var: None,
                kind,
            },
        };
        state.entries.insert(full, entry.clone());
        Ok(entry)
    }

    pub fn weight(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        Ok(self.entry(name, shape.into(), init, ParamKind::Weight)?.tensor)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Buffer> {
        let e = self.entry(name, shape.into(), init, ParamKind::Buffer)?;
        Ok(Buffer {
            tensor: e.tensor,
            var: e.var,
        })
    }

    /// Finalizes construction. Loading fails if the source held tensors the
    /// network never asked for.
    pub fn finish(self) -> Result<ParamStore> {
        let state = self.state.borrow();
        if let Source::Load(map) | Source::Frozen(map) = &state.source {
            if !map.is_empty() {
                let mut extra: Vec<&String> = map.keys().collect();
                extra.sort();
                return Err(Error::ParamMismatch(format!("unexpected tensors {extra:?}")));
            }
        }
        Ok(ParamStore {
            entries: state.entries.clone(),
            dtype: state.dtype,
            device: state.device.clone(),
        })
    }
}

fn generate(rng: &mut Rng, shape: &Shape, init: &Init, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = shape.elem_count();
    let values: Vec<f64> = match init {
        Init::Const(c) => vec![*c; n],
        Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(*lo..*hi)).collect(),
        Init::Normal { mean, std } => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            })
            .collect(),
        Init::FanInUniform { fan_in } => {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Values(v) => {
            if v.len() != n {
                return Err(Error::ParamMismatch(format!(
                    "init values have length {}, shape needs {n}",
                    v.len()
                )));
            }
            v.clone()
        }
    };
    Ok(Tensor::from_vec(values, shape.clone(), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn build(b: &ParamBuilder) -> Result<()> {
        b.pp("a").weight("w", (2, 3), Init::Normal { mean: 0.0, std: 1.0 })?;
        b.pp("a").buffer("mean", 3, Init::Const(0.0))?;
        b.weight("bias", 3, Init::Const(1.0))?;
        Ok(())
    }

    #[test]
    fn seeded_init_is_reproducible() -> Result<()> {
        let mk = || -> Result<ParamStore> {
            let b = ParamBuilder::init(SeedStreams::new(3).stream("init"), DType::F64, &Device::Cpu);
            build(&b)?;
            b.finish()
        };
        let (x, y) = (mk()?, mk()?);
        assert_eq!(x.digest()?, y.digest()?);
        assert_eq!(x.weight_count(), 9);
        assert_eq!(x.trainable().len(), 2);
        Ok(())
    }

    #[test]
    fn frozen_rebuild_rejects_missing_and_extra() -> Result<()> {
        let b = ParamBuilder::init(SeedStreams::new(3).stream("init"), DType::F32, &Device::Cpu);
        build(&b)?;
        let store = b.finish()?;
        let mut snap = store.snapshot()?;
        let frozen = ParamBuilder::frozen(snap.clone(), DType::F32, &Device::Cpu);
        build(&frozen)?;
        let frozen = frozen.finish()?;
        assert!(frozen.is_frozen());
        assert_eq!(frozen.digest()?, store.digest()?);

        snap.insert("stray".into(), Tensor::zeros(1, DType::F32, &Device::Cpu)?);
        let extra = ParamBuilder::frozen(snap.clone(), DType::F32, &Device::Cpu);
        build(&extra)?;
        assert!(matches!(extra.finish(), Err(Error::ParamMismatch(_))));

        snap.remove("bias");
        let missing = ParamBuilder::frozen(snap, DType::F32, &Device::Cpu);
        assert!(build(&missing).is_err());
        Ok(())
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::DomainMask;
use crate::tensor::Tensor;

/// Which half of the encoder–decoder a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Encoder,
    Decoder,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Encoder => "encoder",
            Region::Decoder => "decoder",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Region::Encoder),
            "decoder" => Ok(Region::Decoder),
            other => Err(Error::Input(format!("unknown region {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub region: Region,
    /// Weight matrices and embeddings are maskable; biases and norm parameters are not.
    pub maskable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-tensor metadata, ordered by tensor name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, ParamInfo>,
}

impl ParameterRegistry {
    pub fn new(infos: impl IntoIterator<Item = ParamInfo>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for info in infos {
            if info.shape.is_empty() || info.shape.contains(&0) {
                return Err(Error::Shape(format!("tensor {} has empty shape {:?}", info.name, info.shape)));
            }
            if let Some(prev) = entries.insert(info.name.clone(), info) {
                return Err(Error::Input(format!("duplicate tensor name {}", prev.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&ParamInfo> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamInfo> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn maskable(&self) -> impl Iterator<Item = &ParamInfo> {
        self.iter().filter(|p| p.maskable)
    }

    /// Maskable tensors of one region, in name order.
    pub fn pool(&self, region: Region) -> impl Iterator<Item = &ParamInfo> {
        self.maskable().filter(move |p| p.region == region)
    }

    pub fn pool_size(&self, region: Region) -> usize {
        self.pool(region).map(ParamInfo::numel).sum()
    }

    /// Checks that `store` has exactly the registered names and shapes.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.len() {
            return Err(Error::Shape(format!(
                "parameter store has {} tensors, registry has {}",
                store.len(),
                self.len()
            )));
        }
        for info in self.iter() {
            let t = store
                .get(&info.name)
                .ok_or_else(|| Error::Shape(format!("parameter store is missing {}", info.name)))?;
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{}: shape {:?} differs from registered {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
        }
        Ok(())
    }

    /// Sidecar text form: one `name region maskable` line per tensor.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        for p in self.iter() {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            s.push_str(&format!("{} {} {} {}\n", p.name, p.region, p.maskable, dims.join("x")));
        }
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut infos = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Input(format!("registry line {}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, region, maskable, dims] = fields[..] else { return Err(bad()) };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            infos.push(ParamInfo {
                name: name.to_string(),
                shape,
                region: region.parse()?,
                maskable: maskable.parse().map_err(|_| bad())?,
            });
        }
        Self::new(infos)
    }
}

/// Named model parameters, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Exact parameter counts, optionally with the ones-count of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub maskable: u64,
    pub masked_ones: Option<u64>,
}

pub fn count_params(registry: &ParameterRegistry, mask: Option<&DomainMask>) -> Result<ParamCounts> {
    let mut c = ParamCounts {
        total: 0,
        encoder: 0,
        decoder: 0,
        maskable: 0,
        masked_ones: None,
    };
    for p in registry.iter() {
        let n = p.numel() as u64;
        c.total += n;
        match p.region {
            Region::Encoder => c.encoder += n,
            Region::Decoder => c.decoder += n,
        }
        if p.maskable {
            c.maskable += n;
        }
    }
    if let Some(mask) = mask {
        mask.check_registry(registry)?;
        c.masked_ones = Some(mask.count_ones());
    }
    Ok(c)
}

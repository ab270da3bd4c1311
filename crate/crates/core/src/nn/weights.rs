//! Named weight tables and the DBW1 container.
//!
//! Layout (little-endian): `"DBW1"`, u32 tensor count, then per tensor a u16
//! name length, the UTF-8 name, a u8 dtype code (0 = f32), a u8 rank, u32 dims
//! and the raw values. A u32-length-prefixed UTF-8 TOML block follows, mapping
//! each role (the name prefix before `/`) to its network configuration.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use super::linknet::{NetworkConfig, Program, Tape};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DBW1";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Parameters of one network, ordered as its program declares them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    config: NetworkConfig,
    tensors: Vec<NamedTensor>,
}

impl NetworkWeights {
    /// Checks names, shapes and finiteness against the program for `config`.
    pub fn new(config: NetworkConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        let program = Program::linknet(&config)?;
        if program.params().len() != tensors.len() {
            return Err(Error::InvalidWeights(format!(
                "configuration needs {} tensors, found {}",
                program.params().len(),
                tensors.len()
            )));
        }
        for (spec, t) in program.params().iter().zip(&tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.values.len() != spec.len() {
                return Err(Error::InvalidWeights(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name, spec.shape, t.name, t.shape
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidWeights(format!("{} contains non-finite values", t.name)));
            }
        }
        Ok(NetworkWeights { config, tensors })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut set = WeightSet::default();
        set.insert("net", self.clone());
        set.save(path)
    }

    /// Loads a file holding exactly one network.
    pub fn load(path: &Path) -> Result<Self> {
        let mut set = WeightSet::load(path)?;
        if set.nets.len() != 1 {
            return Err(Error::InvalidWeights(format!(
                "expected a single network, file holds {}",
                set.nets.len()
            )));
        }
        Ok(set.nets.pop().expect("one entry").1)
    }
}

/// Fresh LinkNet weights for `config`.
pub fn build_linknet<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<NetworkWeights> {
    let program = Program::linknet(config)?;
    let values = program.init(rng);
    let tensors = program
        .params()
        .iter()
        .zip(values)
        .map(|(spec, values)| NamedTensor {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            values,
        })
        .collect();
    Ok(NetworkWeights {
        config: config.clone(),
        tensors,
    })
}

/// One-shot inference; use [`Network`] to avoid rebuilding the program per call.
pub fn forward(w: &NetworkWeights, x: Tensor<f32>) -> Result<Tensor<f32>> {
    Network::<f32>::from_weights(w)?.forward(x)
}

/// A program together with parameters in the evaluation precision.
#[derive(Clone, Debug)]
pub struct Network<T> {
    program: Program,
    params: Vec<Vec<T>>,
}

impl<T: Real> Network<T> {
    pub fn from_weights(w: &NetworkWeights) -> Result<Self> {
        let program = Program::linknet(&w.config)?;
        let params = w
            .tensors
            .iter()
            .map(|t| t.values.iter().map(|&v| T::of_f32(v)).collect())
            .collect();
        Ok(Network { program, params })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn forward(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        self.program.forward(&self.params, x)
    }

    pub fn forward_tape(&self, x: Tensor<T>) -> Result<Tape<T>> {
        self.program.forward_tape(&self.params, x)
    }

    pub fn backward(&self, tape: &Tape<T>, d_logits: Tensor<T>) -> Vec<Vec<T>> {
        self.program.backward(&self.params, tape, d_logits)
    }

    pub fn to_weights(&self) -> NetworkWeights {
        let tensors = self
            .program
            .params()
            .iter()
            .zip(&self.params)
            .map(|(spec, p)| NamedTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                values: p.iter().map(|v| v.as_f32()).collect(),
            })
            .collect();
        NetworkWeights {
            config: self.program.config().clone(),
            tensors,
        }
    }
}

/// Several networks stored in one file, keyed by role (e.g. `stage1`, `axial`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    nets: Vec<(String, NetworkWeights)>,
}

impl WeightSet {
    pub fn insert(&mut self, role: &str, w: NetworkWeights) {
        match self.nets.iter_mut().find(|(r, _)| r == role) {
            Some(slot) => slot.1 = w,
            None => self.nets.push((role.to_string(), w)),
        }
    }

    pub fn get(&self, role: &str) -> Option<&NetworkWeights> {
        self.nets.iter().find(|(r, _)| r == role).map(|(_, w)| w)
    }

    pub fn require(&self, role: &str) -> Result<&NetworkWeights> {
        self.get(role)
            .ok_or_else(|| Error::InvalidWeights(format!("weight file has no '{role}' network")))
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.nets.iter().map(|(r, _)| r.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count: usize = self.nets.iter().map(|(_, w)| w.tensors.len()).sum();
        out.write_u32::<LittleEndian>(count as u32).unwrap();
        let mut meta = BTreeMap::new();
        for (role, w) in &self.nets {
            meta.insert(role.clone(), w.config.clone());
            for t in &w.tensors {
                let name = format!("{role}/{}", t.name);
                out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
                out.extend_from_slice(name.as_bytes());
                out.write_u8(DTYPE_F32).unwrap();
                out.write_u8(t.shape.len() as u8).unwrap();
                for &d in &t.shape {
                    out.write_u32::<LittleEndian>(d as u32).unwrap();
                }
                for &v in &t.values {
                    out.write_f32::<LittleEndian>(v).unwrap();
                }
            }
        }
        let text = toml::to_string(&meta).expect("network configs serialize");
        out.write_u32::<LittleEndian>(text.len() as u32).unwrap();
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::InvalidWeights(m.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("file too short"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic, not a DBW1 weight file"));
        }
        let truncated = |_| corrupt("truncated weight file");
        let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut grouped: Vec<(String, Vec<NamedTensor>)> = Vec::new();
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let dtype = r.read_u8().map_err(truncated)?;
            if dtype != DTYPE_F32 {
                return Err(Error::InvalidWeights(format!("{name}: unsupported dtype code {dtype}")));
            }
            let ndim = r.read_u8().map_err(truncated)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(truncated)?;
            let n: usize = shape.iter().product();
            if (bytes.len() as u64).saturating_sub(r.position()) < 4 * n as u64 {
                return Err(corrupt("truncated weight file"));
            }
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values).map_err(truncated)?;
            let (role, local) = name
                .split_once('/')
                .ok_or_else(|| Error::InvalidWeights(format!("tensor '{name}' lacks a role prefix")))?;
            let t = NamedTensor {
                name: local.to_string(),
                shape,
                values,
            };
            match grouped.last_mut() {
                Some((r, ts)) if r == role => ts.push(t),
                _ => {
                    if grouped.iter().any(|(r, _)| r == role) {
                        return Err(Error::InvalidWeights(format!("tensors of '{role}' are not contiguous")));
                    }
                    grouped.push((role.to_string(), vec![t]));
                }
            }
        }
        let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(truncated)?;
        let text = String::from_utf8(text).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut meta: BTreeMap<String, NetworkConfig> =
            toml::from_str(&text).map_err(|e| Error::InvalidWeights(format!("metadata: {e}")))?;
        let mut set = WeightSet::default();
        for (role, tensors) in grouped {
            let config = meta
                .remove(&role)
                .ok_or_else(|| Error::InvalidWeights(format!("no configuration for '{role}'")))?;
            set.nets.push((role, NetworkWeights::new(config, tensors)?));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

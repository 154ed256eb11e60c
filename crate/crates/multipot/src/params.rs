//! Named parameter storage: shapes plus flat f64 buffers, deterministic
//! initialization, layer grouping for per-layer learning rates, and content
//! checksums for identity assertions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tapegrad::{Tape, Tensor, Value};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("parameter '{0}' already exists")]
    Duplicate(String),
    #[error("unknown parameter '{0}'")]
    Unknown(String),
    #[error("parameter '{name}': {len} values for shape {shape:?}")]
    Length {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("parameter '{0}' contains non-finite values")]
    NonFinite(String),
}

/// Parameters by name, sorted. The canonical flat order used everywhere
/// (optimizer walks, checksums, checkpoints) is the name order of the map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    shapes: BTreeMap<String, Vec<usize>>,
    values: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), ParamError> {
        if self.shapes.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(ParamError::Length {
                name: name.to_string(),
                len: data.len(),
                shape,
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(ParamError::NonFinite(name.to_string()));
        }
        self.shapes.insert(name.to_string(), shape);
        self.values.insert(name.to_string(), data);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<(Vec<usize>, Vec<f64>)> {
        let shape = self.shapes.remove(name)?;
        let data = self.values.remove(name).expect("maps stay in sync");
        Some((shape, data))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.shapes.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.values().map(Vec::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shapes.keys().map(String::as_str)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.get(name).map(Vec::as_slice)
    }

    pub fn data(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<(), ParamError> {
        let shape = self
            .shapes
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(ParamError::Length {
                name: name.to_string(),
                len: data.len(),
                shape: shape.clone(),
            });
        }
        self.values.insert(name.to_string(), data);
        Ok(())
    }

    /// Read-only view of the flat buffers, for optimizer state construction
    /// and checksums.
    pub fn values(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.values
    }

    /// Clone of the flat buffers for an optimizer to mutate; write the
    /// result back with [`ParamStore::assign`].
    pub fn flat(&self) -> BTreeMap<String, Vec<f64>> {
        self.values.clone()
    }

    /// Copy flat buffers back in. Every supplied key must exist with a
    /// matching length; keys not supplied are left alone.
    pub fn assign(&mut self, flat: &BTreeMap<String, Vec<f64>>) -> Result<(), ParamError> {
        for (name, data) in flat {
            let shape = self
                .shapes
                .get(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(ParamError::Length {
                    name: name.clone(),
                    len: data.len(),
                    shape: shape.clone(),
                });
            }
            self.values.insert(name.clone(), data.clone());
        }
        Ok(())
    }

    /// The parameter as a differentiable tape variable.
    pub fn var(&self, tape: &Tape, name: &str) -> Result<Tensor, ParamError> {
        let shape = self
            .shapes
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let value = Value::new(shape.clone(), self.values[name].clone())
            .expect("stored shapes and lengths are consistent");
        tape.var(value)
            .map_err(|_| ParamError::NonFinite(name.to_string()))
    }

    /// Parameters whose names satisfy the predicate, cloned into a new
    /// store.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, shape) in &self.shapes {
            if keep(name) {
                out.shapes.insert(name.clone(), shape.clone());
                out.values.insert(name.clone(), self.values[name].clone());
            }
        }
        out
    }

    /// Content hash over names, shapes, and exact bit patterns, in name
    /// order. Equal checksums mean bit-identical parameters.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, shape) in &self.shapes {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in &self.values[name] {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// RNG for one named parameter: the run seed picks the key, the name picks
/// the stream. Initialization of a parameter therefore never depends on
/// which other parameters exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform samples in ±sqrt(6 / (fan_in + fan_out)). The last axis counts
/// as the output fan, everything before as the input fan.
pub fn glorot_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let fan_out = *shape.last().unwrap_or(&1);
    let fan_in = numel / fan_out.max(1);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..numel).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Layer group of a parameter name, for per-layer learning-rate factors:
/// `embed.*` is "embedding", `block3.*` is "block_3", `head.*` is "heads".
pub fn layer_group(param_name: &str) -> String {
    if param_name.starts_with("embed") {
        return "embedding".to_string();
    }
    if param_name.starts_with("head.") {
        return "heads".to_string();
    }
    if let Some(rest) = param_name.strip_prefix("block") {
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            return format!("block_{digits}");
        }
    }
    "other".to_string()
}

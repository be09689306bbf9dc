//! Named parameter storage, initialization and the binary checkpoint container.
//!
//! Container layout:
//!
//! ```text
//! S2SSTEREO-PARAMS\n
//! {"precision":"f32","params":[{"name":..,"shape":[..],"offset":0,"bytes":..},..]}\n
//! <little-endian element data, parameters back to back in registration order>
//! ```
//!
//! Offsets are relative to the first data byte.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PARAMS_MAGIC: &[u8] = b"S2SSTEREO-PARAMS\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Registers a weight drawn from U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        self.register(name, Tensor::new(shape, data)?)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0usize;
        for (_, name, t) in self.iter() {
            let bytes = t.size_bytes();
            entries.push(HeaderEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let header = Header {
            precision: F::NAME.to_string(),
            params: entries,
        };
        let mut out = PARAMS_MAGIC.to_vec();
        out.extend_from_slice(&serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.reserve(offset);
        for t in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, detail: String| Error::Parse {
            what: "parameter container",
            offset,
            detail,
        };
        if !bytes.starts_with(PARAMS_MAGIC) {
            return Err(parse(0, "missing magic".into()));
        }
        let start = PARAMS_MAGIC.len();
        let nl = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse(start, "unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[start..start + nl])
            .map_err(|e| parse(start, e.to_string()))?;
        if header.precision != F::NAME {
            return Err(parse(
                start,
                format!("precision {} does not match {}", header.precision, F::NAME),
            ));
        }
        let data = &bytes[start + nl + 1..];
        let width = F::BITS / 8;
        let mut store = Self::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if n * width != e.bytes {
                return Err(parse(start, format!("{}: byte count mismatch", e.name)));
            }
            let end = e.offset + e.bytes;
            if end > data.len() {
                return Err(parse(
                    start + nl + 1 + data.len(),
                    format!("{}: truncated payload", e.name),
                ));
            }
            let values = data[e.offset..end]
                .chunks_exact(width)
                .map(F::read_le)
                .collect();
            store.register(e.name, Tensor::new(e.shape, values)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: String,
    params: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

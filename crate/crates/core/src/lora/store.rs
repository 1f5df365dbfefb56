//! Container layout: an 8-byte little-endian header length `N`, `N` bytes of
//! JSON header, then the raw little-endian payload. The header maps each tensor
//! name to `{"dtype", "shape", "data_offsets": [begin, end]}` (offsets relative
//! to the payload) and may carry a `__metadata__` string map.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::LoraError;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
}

impl Dtype {
    pub fn size(&self) -> usize {
        4
    }
    pub fn as_str(&self) -> &'static str {
        "F32"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub begin: usize,
    pub end: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorStore {
    /// Header bytes as read; reused on write while the layout is unchanged.
    raw_header: Option<Vec<u8>>,
    /// Sorted by payload offset.
    tensors: Vec<TensorInfo>,
    metadata: Option<BTreeMap<String, String>>,
    payload: Vec<u8>,
}

fn corrupt(msg: impl Into<String>) -> LoraError {
    LoraError::Corrupt(msg.into())
}

pub fn read_store(bytes: &[u8]) -> Result<TensorStore, LoraError> {
    if bytes.len() < 8 {
        return Err(LoraError::Truncated(format!(
            "{} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64
        .checked_add(n)
        .filter(|e| *e <= bytes.len() as u64)
        .ok_or_else(|| {
            LoraError::Truncated(format!(
                "header length {n} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let raw_header = &bytes[8..header_end];
    let payload = &bytes[header_end..];
    let header: Map<String, Value> =
        serde_json::from_slice(raw_header).map_err(|e| corrupt(format!("header JSON: {e}")))?;

    let mut tensors = Vec::new();
    let mut metadata = None;
    for (name, v) in &header {
        if name == METADATA_KEY {
            let m: BTreeMap<String, String> = serde_json::from_value(v.clone())
                .map_err(|e| corrupt(format!("metadata: {e}")))?;
            metadata = Some(m);
            continue;
        }
        let dtype = v
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| corrupt(format!("{name}: missing dtype")))?;
        if dtype != "F32" {
            return Err(LoraError::UnsupportedDtype(dtype.to_string()));
        }
        let shape: Vec<usize> = v
            .get("shape")
            .cloned()
            .and_then(|s| serde_json::from_value(s).ok())
            .ok_or_else(|| corrupt(format!("{name}: bad shape")))?;
        let offs: [usize; 2] = v
            .get("data_offsets")
            .cloned()
            .and_then(|s| serde_json::from_value(s).ok())
            .ok_or_else(|| corrupt(format!("{name}: bad data_offsets")))?;
        let [begin, end] = offs;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| corrupt(format!("{name}: shape overflow")))?;
        if end < begin || end - begin != numel * 4 {
            return Err(corrupt(format!(
                "{name}: offsets [{begin}, {end}] inconsistent with shape {shape:?}"
            )));
        }
        if end > payload.len() {
            return Err(LoraError::Truncated(format!(
                "{name}: offset {end} past payload end {}",
                payload.len()
            )));
        }
        tensors.push(TensorInfo {
            name: name.clone(),
            dtype: Dtype::F32,
            shape,
            begin,
            end,
        });
    }
    tensors.sort_by_key(|t| (t.begin, t.end));
    for w in tensors.windows(2) {
        if w[0].end > w[1].begin {
            return Err(corrupt(format!(
                "tensors '{}' and '{}' overlap",
                w[0].name, w[1].name
            )));
        }
    }
    Ok(TensorStore {
        raw_header: Some(raw_header.to_vec()),
        tensors,
        metadata,
        payload: payload.to_vec(),
    })
}

pub fn write_store(store: &TensorStore) -> Vec<u8> {
    let header = match &store.raw_header {
        Some(h) => h.clone(),
        None => store.canonical_header(),
    };
    let mut out = Vec::with_capacity(8 + header.len() + store.payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&store.payload);
    out
}

impl TensorStore {
    /// Builds a store with tensors laid out back to back in the given order.
    pub fn from_tensors(
        tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
        metadata: Option<BTreeMap<String, String>>,
    ) -> Result<Self, LoraError> {
        let mut infos = Vec::new();
        let mut payload = Vec::new();
        for (name, shape, data) in tensors {
            if data.len() != shape.iter().product::<usize>() {
                return Err(corrupt(format!(
                    "{name}: {} values for shape {shape:?}",
                    data.len()
                )));
            }
            if infos.iter().any(|t: &TensorInfo| t.name == name) || name == METADATA_KEY {
                return Err(corrupt(format!("duplicate tensor name '{name}'")));
            }
            let begin = payload.len();
            for v in &data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            infos.push(TensorInfo {
                name,
                dtype: Dtype::F32,
                shape,
                begin,
                end: payload.len(),
            });
        }
        Ok(Self {
            raw_header: None,
            tensors: infos,
            metadata,
            payload,
        })
    }

    fn canonical_header(&self) -> Vec<u8> {
        let mut s = String::from("{");
        let mut first = true;
        if let Some(m) = &self.metadata {
            s.push_str(&format!(
                "{}:{}",
                serde_json::to_string(METADATA_KEY).unwrap(),
                serde_json::to_string(m).unwrap()
            ));
            first = false;
        }
        for t in &self.tensors {
            if !first {
                s.push(',');
            }
            first = false;
            s.push_str(&format!(
                "{}:{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{},{}]}}",
                serde_json::to_string(&t.name).unwrap(),
                t.dtype.as_str(),
                serde_json::to_string(&t.shape).unwrap(),
                t.begin,
                t.end
            ));
        }
        s.push('}');
        while s.len() % 8 != 0 {
            s.push(' ');
        }
        s.into_bytes()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.info(name).is_some()
    }

    pub fn raw_bytes(&self, name: &str) -> Result<&[u8], LoraError> {
        let t = self
            .info(name)
            .ok_or_else(|| LoraError::MissingTensor(name.to_string()))?;
        Ok(&self.payload[t.begin..t.end])
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>, LoraError> {
        Ok(self
            .raw_bytes(name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Overwrites a tensor's values in place. The layout and header stay intact.
    pub fn set_values(&mut self, name: &str, values: &[f32]) -> Result<(), LoraError> {
        let t = self
            .info(name)
            .cloned()
            .ok_or_else(|| LoraError::MissingTensor(name.to_string()))?;
        if values.len() != t.numel() {
            return Err(corrupt(format!(
                "{name}: {} values for shape {:?}",
                values.len(),
                t.shape
            )));
        }
        for (chunk, v) in self.payload[t.begin..t.end].chunks_exact_mut(4).zip(values) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

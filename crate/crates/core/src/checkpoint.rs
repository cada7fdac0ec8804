//! Binary tensor checkpoints.
//!
//! Layout: an 8-byte little-endian `u64` header length, a JSON header
//! mapping tensor name to `{dtype, shape, offset, length}`, then the raw
//! little-endian payloads. Offsets are relative to the end of the header,
//! ascending in name order, with no padding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

fn dtype_name(dt: DType) -> &'static str {
    match dt {
        DType::F32 => "F32",
        DType::F64 => "F64",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "F32" => Ok(DType::F32),
        "F64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        match t.dtype() {
            DType::F32 => {
                for &v in t.data() {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        header.insert(
            name.clone(),
            TensorEntry {
                dtype: dtype_name(t.dtype()).to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() - offset,
            },
        );
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file shorter than the 8-byte header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Checkpoint(format!("header length {hlen} exceeds file size")))?;
    let header: BTreeMap<String, TensorEntry> = serde_json::from_slice(body)?;
    let payload = &bytes[8 + hlen..];
    let mut out = BTreeMap::new();
    for (name, e) in header {
        let dt = parse_dtype(&e.dtype)?;
        let numel: usize = e.shape.iter().product();
        if numel * dt.size_in_bytes() != e.length {
            return Err(Error::Checkpoint(format!("tensor `{name}`: length does not match shape")));
        }
        let raw = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past end of file")))?;
        let data: Vec<f64> = match dt {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.insert(name, Tensor::new(&e.shape, data, dt)?);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode(&bytes)
}

impl Model {
    /// Every parameter by name (base weights and any attached adapter).
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .map(|(_, n, p)| (n.to_string(), p.value.clone()))
            .collect()
    }

    /// Overwrites base weights from a checkpoint holding exactly the base tensors.
    pub fn load_base_weights(mut self, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let ids = self.base_param_ids();
        if tensors.len() != ids.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} base tensors, checkpoint has {}",
                ids.len(),
                tensors.len()
            )));
        }
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let p = self.store.get_mut(id);
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_base_weights",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.to_dtype(p.value.dtype());
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_header_then_ascending_payloads() {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::f32(&[2], vec![1.0, 2.0]).unwrap());
        m.insert("a".to_string(), Tensor::f32(&[1, 1], vec![-3.5]).unwrap());
        let bytes = encode(&m).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["a"]["length"], 4);
        assert_eq!(header["b"]["offset"], 4);
        assert_eq!(header["b"]["dtype"], "F32");
        assert_eq!(bytes.len(), 8 + hlen + 12);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &(-3.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::f32(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = encode(&m).unwrap();
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), wide in any::<bool>()) {
            let dt = if wide { DType::F64 } else { DType::F32 };
            let mut m = BTreeMap::new();
            m.insert("layers.0.attn.q".to_string(), Tensor::new(&[values.len()], values.clone(), dt).unwrap());
            m.insert("embed".to_string(), Tensor::new(&[1, values.len()], values, dt).unwrap());
            let back = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}

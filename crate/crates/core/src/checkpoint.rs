//! Model checkpoints: magic, header length, JSON header, raw parameters.
//!
//! Layout: `SDCLCKPT`, the header length as a little-endian `u64`, the
//! UTF-8 JSON header, then every parameter as little-endian `f64` in
//! creation order. The header's manifest gives each tensor's name, shape
//! and element offset into the data block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::nets::{build_model, Model, ModelSpec};
use crate::sgem::{ConfounderSet, SgemConfig};

pub const MAGIC: &[u8; 8] = b"SDCLCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub sgem: SgemConfig,
    pub tensors: Vec<TensorEntry>,
    pub confounders: ConfounderSet,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        sgem: model.sgem.clone(),
        tensors,
        confounders: model.confounders.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Domain(format!("bad checkpoint: {}", msg.into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + len..];
    if !data.len().is_multiple_of(8) {
        return Err(corrupt("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = build_model(&header.spec, &header.sgem, 0)?;
    if header.tensors.len() != model.params.len() {
        return Err(corrupt(format!(
            "{} tensors stored, architecture has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        let t = model.params.get_mut(ParamId(i));
        if entry.shape != t.shape() {
            return Err(corrupt(format!(
                "{} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + t.numel())
            .ok_or_else(|| corrupt(format!("{} runs past the data block", entry.name)))?;
        if src.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("{} holds non-finite values", entry.name)));
        }
        t.data_mut().copy_from_slice(src);
    }
    if header.confounders.n() != header.sgem.n {
        return Err(corrupt("confounder set size differs from the expert count"));
    }
    model.confounders = header.confounders;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nets::forward_inference;

    #[test]
    fn round_trip_preserves_outputs() {
        let mut m = build_model(&ModelSpec::default(), &SgemConfig::default(), 4).unwrap();
        m.confounders.blend(
            2,
            crate::sgem::StratumStats {
                mu: vec![0.5; 16],
                sigma: vec![1.5; 16],
            },
        );
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.param_checksum(), m.param_checksum());
        assert_eq!(back.confounders, m.confounders);
        let x = Tensor::new(
            vec![2, 3, 16, 16],
            (0..1536).map(|v| (v % 13) as f64 / 13.0).collect(),
        )
        .unwrap();
        assert_eq!(
            forward_inference(&back, &x).unwrap(),
            forward_inference(&m, &x).unwrap()
        );
    }

    #[test]
    fn header_offsets_are_contiguous() {
        let m = build_model(&ModelSpec::default(), &SgemConfig::default(), 4).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let h: Header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let mut next = 0;
        for e in &h.tensors {
            assert_eq!(e.offset, next);
            next += e.shape.iter().product::<usize>();
        }
        assert_eq!(bytes.len(), 16 + len + 8 * next);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(matches!(from_bytes(b"NOTACKPT"), Err(Error::Domain(_))));
        let m = build_model(&ModelSpec::default(), &SgemConfig::default(), 4).unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(from_bytes(&bytes).is_err());
    }
}

//! Versioned checkpoint files.
//!
//! Layout: the line `CONDFLOW-CKPT 1`, a little-endian `u64` header length,
//! a TOML header, then the parameter blobs back to back. The header holds
//! the element type, the model configuration, the dequantizer description,
//! the training iteration and a manifest of `(store, name, shape)` in blob
//! order. Blobs are little-endian values in the header's element type, so a
//! reload reproduces every parameter bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use ndtensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::dequant::{DequantSpec, Dequantizer};
use crate::error::{FlowError, Result};
use crate::flow::{FlowModel, ModelConfig};
use crate::params::ParamStore;
use crate::rng::rng_from;

const MAGIC: &[u8] = b"CONDFLOW-CKPT 1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub store: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub dtype: String,
    pub iteration: u64,
    pub model: ModelConfig,
    pub dequantizer: DequantSpec,
    pub blobs: Vec<BlobEntry>,
}

/// A model with its dequantizer, as stored on disk.
pub struct Checkpoint<T: Scalar> {
    pub model: FlowModel<T>,
    pub dequantizer: Dequantizer<T>,
    pub iteration: u64,
}

fn format_err(msg: impl Into<String>) -> FlowError {
    FlowError::Format(msg.into())
}

fn stores<'a, T: Scalar>(model: &'a FlowModel<T>, dq: &'a Dequantizer<T>) -> Vec<(&'static str, &'a ParamStore<T>)> {
    let mut out = vec![("model", &model.params)];
    if let Some(p) = dq.params() {
        out.push(("dequantizer", p));
    }
    out
}

pub fn write_checkpoint<T: Scalar>(
    out: &mut impl Write,
    model: &FlowModel<T>,
    dequantizer: &Dequantizer<T>,
    iteration: u64,
) -> Result<()> {
    let mut blobs = Vec::new();
    let mut bytes = Vec::new();
    for (store, params) in stores(model, dequantizer) {
        for p in params.params() {
            blobs.push(BlobEntry {
                store: store.into(),
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            });
            for v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
    }
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        dtype: T::DTYPE.as_str().into(),
        iteration,
        model: model.config.clone(),
        dequantizer: dequantizer.spec(),
        blobs,
    };
    let text = toml::to_string(&header).map_err(|e| format_err(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_header(input: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = vec![0u8; MAGIC.len()];
    input.read_exact(&mut magic).map_err(|_| format_err("file too short for a checkpoint"))?;
    if magic != MAGIC {
        return Err(format_err("not a checkpoint (bad magic line)"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 26 {
        return Err(format_err("checkpoint header is implausibly large"));
    }
    let mut text = vec![0u8; len as usize];
    input.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|e| format_err(e.to_string()))?;
    let header: CheckpointHeader = toml::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(format_err(format!("unsupported checkpoint format {}", header.format)));
    }
    Ok(header)
}

/// Reads a checkpoint into element type `T`; values stored in the other
/// precision are converted.
pub fn read_checkpoint<T: Scalar>(input: &mut impl Read) -> Result<Checkpoint<T>> {
    let header = read_header(input)?;
    let dtype = DType::parse(&header.dtype).ok_or_else(|| format_err(format!("unknown dtype {}", header.dtype)))?;
    // Construction draws random initial values that are all overwritten.
    let mut rng = rng_from(0);
    let mut model = FlowModel::<T>::new(header.model.clone(), &mut rng)?;
    let mut dequantizer = Dequantizer::<T>::build(header.dequantizer, &header.model, &mut rng)?;
    let expected: usize = model.params.len() + dequantizer.params().map_or(0, |p| p.len());
    if expected != header.blobs.len() {
        return Err(format_err(format!("checkpoint lists {} blobs, model has {}", header.blobs.len(), expected)));
    }
    for entry in &header.blobs {
        let store = match entry.store.as_str() {
            "model" => &mut model.params,
            "dequantizer" => dequantizer.params_mut().ok_or_else(|| format_err("dequantizer blob without a dequantizer"))?,
            other => return Err(format_err(format!("unknown store {}", other))),
        };
        let id = store
            .find(&entry.name)
            .ok_or_else(|| format_err(format!("unknown parameter {}", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(format_err(format!(
                "parameter {} has shape {:?} in the file, {:?} in the model",
                entry.name,
                entry.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * dtype.byte_width()];
        input.read_exact(&mut raw).map_err(|_| format_err(format!("truncated blob {}", entry.name)))?;
        let values: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        store.set(id, Tensor::new(entry.shape.clone(), values)?)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(format_err(format!("{} trailing bytes after the last blob", rest.len())));
    }
    Ok(Checkpoint {
        model,
        dequantizer,
        iteration: header.iteration,
    })
}

pub fn save<T: Scalar>(path: &Path, model: &FlowModel<T>, dequantizer: &Dequantizer<T>, iteration: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, dequantizer, iteration)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

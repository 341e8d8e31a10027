//! Saved global models.
//!
//! ```text
//! "FQCK" | version u8 | architecture u8 | layer_count u16
//! per layer: kind u8 | tensor_count u8
//!   per tensor: ndim u8 | ndim × u32 dims | product(dims) × f32
//! ```
//!
//! All integers and floats are little-endian. Values are stored as 32-bit
//! floats, so a round trip rounds every parameter to `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{build_model, Architecture, LayerKind, ModelParams, Tensor};

pub const MAGIC: &[u8; 4] = b"FQCK";
pub const VERSION: u8 = 1;

pub fn encode_model(model: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(model.architecture.id());
    let n = u16::try_from(model.layers.len())
        .map_err(|_| Error::Encode("too many layers".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for layer in &model.layers {
        out.push(layer.kind.id());
        let tensors = layer.tensors();
        out.push(tensors.len() as u8);
        for t in tensors {
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Encode("tensor rank exceeds u8".into()))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Encode("dimension exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse a checkpoint and check it matches the layer structure of its
/// architecture.
pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("bad checkpoint magic"));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let arch_id = c.u8()?;
    let architecture = Architecture::from_id(arch_id)
        .ok_or_else(|| corrupt(format!("unknown architecture id {arch_id}")))?;
    let mut model = build_model(architecture, 0);
    let n = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
    if n != model.layers.len() {
        return Err(corrupt(format!(
            "{n} layers, {} expects {}",
            architecture.name(),
            model.layers.len()
        )));
    }
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let kind = c.u8()?;
        if LayerKind::from_id(kind) != Some(layer.kind) {
            return Err(corrupt(format!("layer {i}: unexpected kind {kind}")));
        }
        let count = c.u8()? as usize;
        let mut tensors = layer.tensors_mut();
        if count != tensors.len() {
            return Err(corrupt(format!("layer {i}: {count} tensors")));
        }
        for t in tensors.iter_mut() {
            let ndim = c.u8()? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| Ok(u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as usize))
                .collect::<Result<_>>()?;
            if shape != t.shape() {
                return Err(corrupt(format!(
                    "layer {i}: shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            let raw = c.take(4 * t.len())?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            **t = Tensor::new(shape, data)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    Ok(model)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

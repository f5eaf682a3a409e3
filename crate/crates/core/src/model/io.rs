//! Binary model container (little endian):
//!
//! ```text
//! magic      8 bytes  "ELMODEL\0"
//! version    u32
//! n m l p    4 × u32
//! header     u32 length + UTF-8 TOML (architecture)
//! count      u32
//! tensors    count × { u32 name length, name, u32 rows, u32 cols, rows·cols × f64 }
//! ```
//!
//! Scalers are stored as tensors named `scaler.<signal>.mean|std`, so every
//! floating-point value round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Dims, ELModel, ModelError, ModelInit, Scaler, Scalers};
use crate::ad::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ELMODEL\0";

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn scaler_tensors(name: &str, s: &Scaler) -> [(String, Tensor); 2] {
    [(format!("scaler.{name}.mean"), Tensor::row(&s.mean)), (format!("scaler.{name}.std"), Tensor::row(&s.std))]
}

pub fn write_model(model: &ELModel, w: &mut impl Write) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    put_u32(w, MODEL_FORMAT_VERSION)?;
    let Dims { n, m, l, p } = model.dims;
    for d in [n, m, l, p] {
        put_u32(w, d as u32)?;
    }
    let header = toml::to_string(&model.arch).map_err(|e| ModelError::Format(e.to_string()))?;
    put_u32(w, header.len() as u32)?;
    w.write_all(header.as_bytes())?;
    let s = &model.scalers;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, sc) in [("y", &s.y), ("v", &s.v), ("d", &s.d), ("z", &s.z)] {
        tensors.extend(scaler_tensors(name, sc));
    }
    for (name, t) in model.store.iter() {
        tensors.push((name.to_string(), t.clone()));
    }
    put_u32(w, tensors.len() as u32)?;
    for (name, t) in &tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rows() as u32)?;
        put_u32(w, t.cols() as u32)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ModelError::Format(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>, ModelError> {
    if len > 1 << 30 {
        return Err(ModelError::Format(format!("implausible field length {len}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|e| ModelError::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_model(r: &mut impl Read) -> Result<ELModel, ModelError> {
    let magic = get_bytes(r, 8)?;
    if magic != MAGIC {
        return Err(ModelError::Format("not a model file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported format version {version}")));
    }
    let dims =
        Dims { n: get_u32(r)? as usize, m: get_u32(r)? as usize, l: get_u32(r)? as usize, p: get_u32(r)? as usize };
    let hlen = get_u32(r)? as usize;
    let header = String::from_utf8(get_bytes(r, hlen)?).map_err(|e| ModelError::Format(e.to_string()))?;
    let arch: Architecture = toml::from_str(&header).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut model = ELModel::new(dims, arch, Scalers::identity(dims), &ModelInit::default(), 0);
    let count = get_u32(r)? as usize;
    let mut seen = vec![false; model.store.len()];
    let mut scalers: std::collections::HashMap<String, Vec<f64>> = Default::default();
    for _ in 0..count {
        let nlen = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, nlen)?).map_err(|e| ModelError::Format(e.to_string()))?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let raw = get_bytes(r, rows * cols * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if name.starts_with("scaler.") {
            scalers.insert(name, data);
            continue;
        }
        let pr = model.store.lookup(&name).ok_or_else(|| ModelError::Format(format!("unknown tensor {name}")))?;
        let slot = model.store.get_mut(pr);
        if slot.shape() != [rows, cols] {
            return Err(ModelError::Format(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::new(rows, cols, data);
        seen[pr.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.refs().nth(i).map(|r| model.store.name(r).to_string()).unwrap_or_default();
        return Err(ModelError::Format(format!("missing tensor {name}")));
    }
    let mut take = |sig: &str, dim: usize| -> Result<Scaler, ModelError> {
        let mut get = |kind: &str| {
            let key = format!("scaler.{sig}.{kind}");
            let v = scalers.remove(&key).ok_or_else(|| ModelError::Format(format!("missing tensor {key}")))?;
            if v.len() != dim {
                return Err(ModelError::Format(format!("{key} has length {} (expected {dim})", v.len())));
            }
            Ok(v)
        };
        Ok(Scaler { mean: get("mean")?, std: get("std")? })
    };
    model.scalers =
        Scalers { y: take("y", dims.n)?, v: take("v", dims.m)?, d: take("d", dims.l)?, z: take("z", dims.p)? };
    Ok(model)
}

impl ELModel {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        write_model(self, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        read_model(&mut bytes.as_slice())
    }
}

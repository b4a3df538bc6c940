//! Binary checkpoint: `DNLB1`, a little-endian `u64` header length, a UTF-8
//! JSON manifest, then the raw parameter arrays followed by the EMA arrays,
//! each as little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::ParamStore;
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DNLB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub params: Vec<ManifestEntry>,
    pub has_ema: bool,
    /// Free-form metadata (run configuration, model spec).
    pub meta: serde_json::Value,
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes `magic`, header length and JSON header.
pub(crate) fn write_header<W: Write, H: Serialize>(w: &mut W, magic: &[u8], header: &H) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub(crate) fn read_header<R: Read, H: for<'de> Deserialize<'de>>(r: &mut R, magic: &[u8]) -> Result<H> {
    let mut m = vec![0u8; magic.len()];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let text = std::str::from_utf8(&json).map_err(|e| Error::Format(e.to_string()))?;
    Ok(serde_json::from_str(text)?)
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        params: store
            .params()
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        has_ema: store.ema().is_some(),
        meta,
    };
    write_header(w, CHECKPOINT_MAGIC, &header)?;
    for p in store.params() {
        write_f64s(w, p.value.data())?;
    }
    if let Some(ema) = store.ema() {
        for t in ema {
            write_f64s(w, t.data())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParamStore, serde_json::Value)> {
    let header: CheckpointHeader = read_header(r, CHECKPOINT_MAGIC)?;
    let mut named = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n = e.shape.iter().product();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), read_f64s(r, n)?)?));
    }
    let mut store = ParamStore::new(named);
    if header.has_ema {
        let mut shadow = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n = e.shape.iter().product();
            shadow.push(Tensor::new(e.shape.clone(), read_f64s(r, n)?)?);
        }
        store.set_ema(shadow)?;
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, store, meta)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

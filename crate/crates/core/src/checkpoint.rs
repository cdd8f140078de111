//! Binary checkpoints.
//!
//! The file starts with the ASCII magic `DIALCKPT1`, followed by one record
//! per tensor until end of file:
//!
//! ```text
//! u32 name_len | name bytes (UTF-8) | u32 rows | u32 cols | rows*cols f64
//! ```
//!
//! All integers and floats are little-endian, values row-major. Model
//! tensors use the names of [`ModelParams::named_tensors`]; the center
//! table is stored as `centers`, `centers.gamma` (1x1) and
//! `centers.initialized` (1x1, 0 or 1).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::CenterTable;
use crate::models::{Linear, Mlp, ModelParams};
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 9] = b"DIALCKPT1";

pub fn encode(params: &ModelParams, centers: &CenterTable) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let gamma = Tensor2::scalar(centers.gamma());
    let init = Tensor2::scalar(if centers.is_initialized() { 1.0 } else { 0.0 });
    let mut records = params.named_tensors();
    records.push(("centers".into(), centers.centers()));
    records.push(("centers.gamma".into(), &gamma));
    records.push(("centers.initialized".into(), &init));
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Length(format!(
                "checkpoint truncated at byte offset {}: {what} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Tensors of a checkpoint in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor2)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let head: Vec<String> = bytes.iter().take(MAGIC.len()).map(|b| format!("{b:02x}")).collect();
        return Err(Error::Format(format!("not a checkpoint: magic bytes [{}] at offset 0", head.join(" "))));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor name at byte offset {} is not UTF-8", start + 4)))?
            .to_string();
        let shape_at = r.pos;
        let rows = r.u32("row count")?;
        let cols = r.u32("column count")?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has invalid shape {rows}x{cols} at byte offset {shape_at}")))?;
        let raw = r.take(n.saturating_mul(8), &format!("values of `{name}`"))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor2::new(rows, cols, values)?));
    }
    Ok(out)
}

fn take_layers(map: &mut BTreeMap<String, Tensor2>, prefix: &str) -> Result<Vec<Linear>> {
    let mut layers = Vec::new();
    for i in 0.. {
        let (wk, bk) = (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"));
        match (map.remove(&wk), map.remove(&bk)) {
            (Some(weight), Some(bias)) => layers.push(Linear { weight, bias }),
            (None, None) => break,
            _ => return Err(Error::Format(format!("layer {prefix}.{i} lacks its weight or bias"))),
        }
    }
    Ok(layers)
}

fn scalar(map: &mut BTreeMap<String, Tensor2>, name: &str) -> Result<f64> {
    match map.remove(name) {
        Some(t) if t.shape() == (1, 1) => Ok(t.get(0, 0)),
        Some(t) => Err(Error::Format(format!("`{name}` must be 1x1, found {}x{}", t.rows(), t.cols()))),
        None => Err(Error::Format(format!("checkpoint has no `{name}` record"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CenterTable)> {
    let mut map = BTreeMap::new();
    for (name, t) in decode_tensors(bytes)? {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let encoder = take_layers(&mut map, "encoder")?;
    let discriminator = take_layers(&mut map, "discriminator")?;
    let weight = map.remove("classifier.weight").ok_or_else(|| Error::Format("missing classifier.weight".into()))?;
    let bias = map.remove("classifier.bias").ok_or_else(|| Error::Format("missing classifier.bias".into()))?;
    let centers = map.remove("centers").ok_or_else(|| Error::Format("missing centers".into()))?;
    let gamma = scalar(&mut map, "centers.gamma")?;
    let initialized = scalar(&mut map, "centers.initialized")? != 0.0;
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    if encoder.is_empty() {
        return Err(Error::Format("checkpoint has no encoder layers".into()));
    }
    let params = ModelParams {
        encoder: Mlp { layers: encoder },
        classifier: Linear { weight, bias },
        discriminator: (!discriminator.is_empty()).then_some(Mlp { layers: discriminator }),
    };
    params.arch().validate().map_err(|e| Error::Format(format!("inconsistent checkpoint shapes: {e}")))?;
    if centers.shape() != (params.num_classes(), params.feature_dim()) {
        return Err(Error::Format(format!(
            "centers are {}x{} but the model has {} classes of dimension {}",
            centers.rows(),
            centers.cols(),
            params.num_classes(),
            params.feature_dim()
        )));
    }
    Ok((params, CenterTable::from_parts(centers, gamma, initialized)))
}

pub fn save_checkpoint(params: &ModelParams, centers: &CenterTable, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params, centers)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CenterTable)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

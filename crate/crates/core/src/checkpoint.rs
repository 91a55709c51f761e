//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "XSUMCKPT"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! block_count  u32
//! blocks       block_count × {
//!     name_len u32, name UTF-8,
//!     kind u8 (0 parameter, 1 first moment, 2 second moment),
//!     frozen u8, steps u64, rows u32, cols u32,
//!     rows × cols f64 values, row-major
//! }
//! ```
//!
//! Parameter blocks appear in store order. Moment blocks follow for every
//! parameter that has optimizer state; `steps` is that parameter's update
//! count and is 0 for parameter blocks.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"XSUMCKPT";
pub const FORMAT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_M: u8 = 1;
const KIND_V: u8 = 2;

/// Decoded container: header, parameters, and optimizer moments by name.
#[derive(Debug, Clone)]
pub struct RawCheckpoint<H> {
    pub header: H,
    pub params: ParamStore,
    pub moments: Vec<(String, Moments)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, kind: u8, frozen: bool, steps: u64, value: &Array2<f64>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.push(frozen as u8);
    out.extend_from_slice(&steps.to_le_bytes());
    put_u32(out, value.nrows() as u32);
    put_u32(out, value.ncols() as u32);
    for x in value.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode<H: Serialize>(header: &H, store: &ParamStore, optimizer: Option<&AdamW>) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let moments: Vec<(&str, &Moments)> = match optimizer {
        Some(opt) => store
            .iter()
            .filter_map(|(id, p)| opt.moments[id.index()].as_ref().map(|m| (p.name.as_str(), m)))
            .collect(),
        None => Vec::new(),
    };
    put_u32(&mut out, (store.len() + 2 * moments.len()) as u32);
    for (_, p) in store.iter() {
        put_block(&mut out, &p.name, KIND_PARAM, p.frozen, 0, &p.value);
    }
    for (name, m) in moments {
        put_block(&mut out, name, KIND_M, false, m.steps, &m.m);
        put_block(&mut out, name, KIND_V, false, m.steps, &m.v);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<RawCheckpoint<H>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = c.u64()? as usize;
    let header: H = serde_json::from_slice(c.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    let mut first: Vec<(String, u64, Array2<f64>)> = Vec::new();
    let mut moments = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let kind = c.u8()?;
        let frozen = c.u8()? != 0;
        let steps = c.u64()?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("sized above");
        match kind {
            KIND_PARAM => {
                if params.id(&name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
                }
                params.add(name, value, frozen);
            }
            KIND_M => first.push((name, steps, value)),
            KIND_V => {
                let Some(pos) = first.iter().position(|(n, _, _)| *n == name) else {
                    return Err(Error::Checkpoint(format!("second moment for {name} without a first")));
                };
                let (name, steps, m) = first.swap_remove(pos);
                moments.push((name, Moments { m, v: value, steps }));
            }
            other => return Err(Error::Checkpoint(format!("unknown block kind {other}"))),
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(RawCheckpoint {
        header,
        params,
        moments,
    })
}

pub fn save<H: Serialize>(path: &Path, header: &H, store: &ParamStore, optimizer: Option<&AdamW>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(header, store, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<RawCheckpoint<H>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Optimizer for `store` with moments restored by parameter name.
pub fn restore_optimizer(config: AdamWConfig, store: &ParamStore, moments: &[(String, Moments)]) -> Result<AdamW> {
    let mut opt = AdamW::new(config, store);
    for (name, m) in moments {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
        if store.value(id).dim() != m.m.dim() {
            return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
        }
        opt.moments[id.index()] = Some(m.clone());
    }
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]], false);
        store.add("b", array![[0.1 + 0.2]], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Some(array![[0.5, 0.1], [0.0, 1.0]]), None], 0.01).unwrap();
        let bytes = encode(&serde_json::json!({"epoch": 3}), &store, Some(&opt));
        let back: RawCheckpoint<serde_json::Value> = decode(&bytes).unwrap();
        assert_eq!(back.header["epoch"], 3);
        assert_eq!(back.params, store);
        for (x, y) in back.params.value(store.id("a").unwrap()).iter().zip(store.value(store.id("a").unwrap())) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let restored = restore_optimizer(AdamWConfig::default(), &back.params, &back.moments).unwrap();
        assert_eq!(restored, opt);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<serde_json::Value>(b"NOTACKPT").is_err());
        let store = ParamStore::new();
        let mut bytes = encode(&1, &store, None);
        bytes.push(0);
        assert!(decode::<i32>(&bytes).is_err());
        let mut bytes = encode(&1, &store, None);
        bytes[8] = 9;
        assert!(decode::<i32>(&bytes).unwrap_err().to_string().contains("version"));
    }
}

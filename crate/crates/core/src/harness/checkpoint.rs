//! Little-endian checkpoint container.
//!
//! ```text
//! "GCAC" | version u32 | entry count u32
//! per entry: name len u32 | name | rank u32 | extents u32×rank | dtype u8 | values
//! CRC32 (IEEE) of everything above, u32
//! ```
//!
//! dtype 0 holds f32 parameter values; dtype 1 holds raw bytes and is used
//! for the `meta.config` (JSON text) and `meta.iteration` (u64) entries.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"GCAC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;
const META_CONFIG: &str = "meta.config";
const META_ITERATION: &str = "meta.iteration";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub config_json: String,
    pub iteration: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], dtype: u8, payload: &[u8]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    buf.push(dtype);
    buf.extend_from_slice(payload);
}

impl Checkpoint {
    pub fn from_store<T: Element>(store: &ParamStore<T>, config_json: &str, iteration: u64) -> Self {
        Self {
            params: store.iter().map(|(_, p)| (p.path.clone(), p.value.cast())).collect(),
            config_json: config_json.to_string(),
            iteration,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, (self.params.len() + 2) as u32);
        for (name, t) in &self.params {
            let mut payload = Vec::with_capacity(4 * t.len());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            put_entry(&mut buf, name, t.shape(), DTYPE_F32, &payload);
        }
        let cfg = self.config_json.as_bytes();
        put_entry(&mut buf, META_CONFIG, &[cfg.len()], DTYPE_BYTES, cfg);
        put_entry(&mut buf, META_ITERATION, &[8], DTYPE_BYTES, &self.iteration.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("file truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch"));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut config_json = None;
        let mut iteration = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("entry name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            match r.take(1)?[0] {
                DTYPE_F32 => {
                    let raw = r.take(4 * n)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    params.push((name, Tensor::new(&shape, data)?));
                }
                DTYPE_BYTES => {
                    let raw = r.take(n)?;
                    match name.as_str() {
                        META_CONFIG => config_json = Some(String::from_utf8(raw.to_vec()).map_err(|_| bad("config is not UTF-8"))?),
                        META_ITERATION if n == 8 => iteration = Some(u64::from_le_bytes(raw.try_into().expect("8 bytes"))),
                        _ => return Err(Error::Checkpoint(format!("unexpected byte entry `{name}`"))),
                    }
                }
                d => return Err(Error::Checkpoint(format!("unknown dtype {d} for `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            params,
            config_json: config_json.ok_or_else(|| bad("missing meta.config"))?,
            iteration: iteration.ok_or_else(|| bad("missing meta.iteration"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy the stored values into `store`; with `strict`, names must match
    /// the store exactly.
    pub fn restore<T: Element>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<()> {
        store.load_values(self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(), strict)
    }

    /// Size implied by the layout: header, per-entry fixed overhead
    /// (name length, rank, dtype, extents) plus names and payloads, CRC.
    pub fn expected_size(&self) -> usize {
        let entry = |name: &str, rank: usize, payload: usize| 4 + name.len() + 4 + 4 * rank + 1 + payload;
        let mut size = 12 + 4;
        for (n, t) in &self.params {
            size += entry(n, t.shape().len(), 4 * t.len());
        }
        size += entry(META_CONFIG, 1, self.config_json.len());
        size += entry(META_ITERATION, 1, 8);
        size
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

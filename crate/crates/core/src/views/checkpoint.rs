//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "EMOVIEW\0"
//! version  u32
//! header   u32 length + UTF-8 key=value lines (view config, then metadata)
//! count    u32
//! tensor   u32 name length, name, u32 rank, rank x u64 extents, f64 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{parse_kv, ViewConfig};
use super::model::View;
use crate::autodiff::Tensor;
use crate::corpus::FeatureStats;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMOVIEW\0";
pub const VERSION: u32 = 1;

/// A view plus free-form metadata (fold id, epoch) stored in the header.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub view: View,
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(view: &View, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut header = view.config.to_kv();
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') || k.starts_with("meta.") {
            return Err(bad(format!("metadata entry {k:?} cannot be stored")));
        }
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    let tensors = view.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("extent too large"))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("non-UTF-8 text"))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = c.u32()?;
    let header = parse_kv(c.str(hlen)?)?;
    let mut meta = BTreeMap::new();
    let mut cfg_map = BTreeMap::new();
    for (k, v) in header {
        match k.strip_prefix("meta.") {
            Some(m) => {
                meta.insert(m.to_string(), v);
            }
            None => {
                cfg_map.insert(k, v);
            }
        }
    }
    let config = ViewConfig::from_kv(&cfg_map)?;
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = c.str(nlen)?.to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("tensor {name} appears twice")));
        }
    }
    if c.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
    }

    let mut view = View::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = view.store.ids().collect();
    for id in ids {
        let name = view.store.name(id).to_string();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if t.shape() != view.store.get(id).shape() {
            return Err(bad(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                view.store.get(id).shape()
            )));
        }
        *view.store.get_mut(id) = t;
    }
    let bn_names: Vec<&str> = view.batch_norms().iter().map(|(n, _)| *n).collect();
    for name in bn_names {
        let dim = view.batch_norm_mut(name).expect("listed").dim();
        let mut stat = |suffix: &str| -> Result<Vec<f64>> {
            let key = format!("{name}.{suffix}");
            let t = tensors.remove(&key).ok_or_else(|| bad(format!("missing {key}")))?;
            if t.len() != dim {
                return Err(bad(format!("{key} has {} values, expected {dim}", t.len())));
            }
            Ok(t.into_data())
        };
        let mean = stat("running_mean")?;
        let var = stat("running_var")?;
        let bn = view.batch_norm_mut(name).expect("listed");
        bn.running_mean = mean;
        bn.running_var = var;
    }
    match (tensors.remove("norm.mean"), tensors.remove("norm.std")) {
        (Some(m), Some(s)) if m.len() == s.len() => {
            view.norm = Some(FeatureStats {
                mean: m.into_data(),
                std: s.into_data(),
            });
        }
        (None, None) => {}
        _ => return Err(bad("incomplete normalization statistics")),
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { view, meta })
}

impl Checkpoint {
    pub fn new(view: View) -> Self {
        Checkpoint {
            view,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.view, &self.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::file(path, e))?;
        decode(&buf)
    }
}

//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "COGENCKP"
//! version    u32
//! meta       u32 count, then count × (str key, str value)
//! params     u32 count, then count × (str name, u32 ndim, ndim × u32 dim, numel × f32)
//! adam flag  u8 (0 or 1)
//! adam       u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!            then per param: numel × f32 first moment, numel × f32 second moment
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes. Decoding
//! rejects trailing bytes, so `encode(decode(b)) == b` for every accepted `b`.

use super::{Adam, AdamConfig, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COGENCKP";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered key/value block (model config, vocabulary hashes, fingerprint).
    pub meta: Vec<(String, String)>,
    pub params: Vec<NamedTensor>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, adam: Option<&Adam<f32>>, meta: Vec<(String, String)>) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let adam = adam.map(|a| AdamSnapshot {
            step: a.step,
            config: a.config,
            m: a.m.clone(),
            v: a.v.clone(),
        });
        Self { meta, params, adam }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies parameter values into `store`, matching by name and shape.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape of {:?}: checkpoint {:?}, model {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        Ok(())
    }

    /// Rebuilds optimizer state in the store's parameter order.
    pub fn restore_adam(&self, store: &ParamStore<f32>) -> Result<Option<Adam<f32>>> {
        let Some(snap) = &self.adam else { return Ok(None) };
        let mut adam = Adam::new(snap.config, store);
        adam.step = snap.step;
        for (i, p) in self.params.iter().enumerate() {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            adam.m[id.0] = snap.m[i].clone();
            adam.v[id.0] = snap.v[i].clone();
        }
        Ok(Some(adam))
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.register(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)?;
        }
        Ok(store)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_str(&mut out, &p.name);
            put_u32(&mut out, p.shape.len());
            for &d in &p.shape {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, &p.data);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for (m, v) in a.m.iter().zip(&a.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_meta = r.count(8)?;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.push((k, v));
        }
        let n_params = r.count(12)?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("tensor {name:?} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(Error::Checkpoint(format!("tensor {name:?} has a zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
                shape.push(d);
            }
            let data = r.f32s(numel)?;
            params.push(NamedTensor { name, shape, data });
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut hp = [0f64; 4];
                for x in &mut hp {
                    *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    m.push(r.f32s(p.data.len())?);
                    v.push(r.f32s(p.data.len())?);
                }
                Some(AdamSnapshot {
                    step,
                    config: AdamConfig {
                        lr: hp[0],
                        beta1: hp[1],
                        beta2: hp[2],
                        eps: hp[3],
                    },
                    m,
                    v,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, params, adam })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// A record count, bounded by what the remaining bytes could hold.
    fn count(&mut self, min_record: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_record) > self.remaining() {
            return Err(Error::Checkpoint(format!("count {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

//! Binary checkpoints: header, run configuration, named parameter arrays
//! and optional optimizer moments.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u8` element width
//! (4 or 8), then length-prefixed sections. Arrays are written at the
//! element width of the header; loading widens or narrows as needed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{AdamState, ParamStore, Scalar};

const MAGIC: &[u8; 8] = b"SEQAUGCK";
const VERSION: u32 = 1;

/// Element width of stored arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// The width of this build's scalar type.
    pub fn native() -> Self {
        if std::mem::size_of::<Scalar>() == 4 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
}

/// Optimizer moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Run configuration text.
    pub config: String,
    /// Free-form training progress (epoch, step, best score, ...).
    pub meta: BTreeMap<String, String>,
    pub params: Vec<NamedArray>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &str, meta: BTreeMap<String, String>, adam: Option<&AdamState>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, t)| NamedArray { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        let adam = adam.map(|a| {
            let named = |vals: &[Vec<Scalar>]| {
                a.params
                    .iter()
                    .zip(vals)
                    .map(|(id, d)| NamedArray {
                        name: model.store.name(*id).to_string(),
                        shape: model.store.get(*id).shape().to_vec(),
                        data: d.clone(),
                    })
                    .collect()
            };
            AdamSnapshot { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m: named(&a.m), v: named(&a.v) }
        });
        Checkpoint { config: config.to_string(), meta, params, adam }
    }

    /// Copies stored parameters into `store`. Every stored name must exist
    /// with the same shape; parameters absent from the checkpoint are left
    /// untouched.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        for p in &self.params {
            let id = store.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            if store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: stored {:?}, model {:?}",
                    p.name,
                    p.shape,
                    store.get(id).shape()
                )));
            }
            store.set_data(id, p.data.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the optimizer state against `store`.
    pub fn adam_state(&self, store: &ParamStore) -> Result<Option<AdamState>> {
        let Some(a) = &self.adam else { return Ok(None) };
        let mut params = Vec::with_capacity(a.m.len());
        for m in &a.m {
            params.push(store.id(&m.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", m.name)))?);
        }
        Ok(Some(AdamState {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            params,
            m: a.m.iter().map(|x| x.data.clone()).collect(),
            v: a.v.iter().map(|x| x.data.clone()).collect(),
        }))
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(precision.width());
        put_str(&mut w, &self.config);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut w, &meta);
        put_arrays(&mut w, &self.params, precision);
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                w.extend_from_slice(&a.step.to_le_bytes());
                put_arrays(&mut w, &a.m, precision);
                put_arrays(&mut w, &a.v, precision);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let precision = match r.take(1)?[0] {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(Error::Checkpoint(format!("unsupported element width {w}"))),
        };
        let config = r.string()?;
        let meta = r
            .string()?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let params = r.arrays(precision)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let step = r.u64()?;
                let m = r.arrays(precision)?;
                let v = r.arrays(precision)?;
                Some(AdamSnapshot { lr, beta1, beta2, eps, step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, meta, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(Precision::native())).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_arrays(w: &mut Vec<u8>, arrays: &[NamedArray], precision: Precision) {
    w.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        put_str(w, &a.name);
        w.extend_from_slice(&(a.shape.len() as u64).to_le_bytes());
        for &d in &a.shape {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &a.data {
            match precision {
                Precision::F32 => w.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => w.extend_from_slice(&(x as f64).to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("implausible length {n} at byte {}", self.pos - 8)));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }

    fn arrays(&mut self, precision: Precision) -> Result<Vec<NamedArray>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.len()?;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let width = precision.width() as usize;
            let raw = self.take(numel.checked_mul(width).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw
                .chunks_exact(width)
                .map(|c| match precision {
                    Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as Scalar,
                    Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")) as Scalar,
                })
                .collect();
            out.push(NamedArray { name, shape, data });
        }
        Ok(out)
    }
}

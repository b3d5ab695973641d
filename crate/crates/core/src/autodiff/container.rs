//! Little-endian binary container for named real-valued tensors.
//!
//! Layout:
//!
//! ```text
//! magic   b"DIFT"
//! version u32              (currently 1)
//! count   u32              number of entries
//! entry:
//!   name_len u16, name (utf-8)
//!   ndim     u8,  dims u32 * ndim
//!   data     f64 * prod(dims), row-major
//! ```
//!
//! Networks are stored as one `<prefix>/layers` entry of shape `[L, 4]`
//! holding `(out, in, activation code, scale)` per layer, followed by
//! `<prefix>/layer{k}/weight` (`[out, in]`) and `<prefix>/layer{k}/bias`.

use std::path::Path;

use super::mlp::{Activation, LayerSpec, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DIFT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated container at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    /// Insert or replace an entry.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Structural(format!(
                "tensor '{name}' has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Structural(format!("tensor '{name}' header too large")));
        }
        let t = Tensor { name, shape, data };
        match self.entries.iter_mut().find(|e| e.name == t.name) {
            Some(e) => *e = t,
            None => self.entries.push(t),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a tensor container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut file = TensorFile::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > buf.len() - r.pos {
                return Err(Error::Format(format!("tensor '{name}' runs past end of data")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            file.entries.push(Tensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn insert_mlp(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        let mut meta = Vec::new();
        for s in net.specs() {
            meta.extend_from_slice(&[s.out_dim as f64, s.in_dim as f64, s.activation.code() as f64, s.scale]);
        }
        self.insert(format!("{prefix}/layers"), vec![net.num_layers(), 4], meta)?;
        for (k, s) in net.specs().iter().enumerate() {
            self.insert(
                format!("{prefix}/layer{k}/weight"),
                vec![s.out_dim, s.in_dim],
                net.weight(k).to_vec(),
            )?;
            self.insert(format!("{prefix}/layer{k}/bias"), vec![s.out_dim], net.bias(k).to_vec())?;
        }
        Ok(())
    }

    pub fn read_mlp(&self, prefix: &str) -> Result<Mlp> {
        let meta = self.require(&format!("{prefix}/layers"))?;
        if meta.shape.len() != 2 || meta.shape[1] != 4 {
            return Err(Error::Format(format!("'{prefix}/layers' must have shape [L, 4]")));
        }
        let mut specs = Vec::new();
        let mut params = Vec::new();
        for (k, row) in meta.data.chunks(4).enumerate() {
            let spec = LayerSpec {
                out_dim: row[0] as usize,
                in_dim: row[1] as usize,
                activation: Activation::from_code(row[2] as u8)?,
                scale: row[3],
            };
            let w = self.require(&format!("{prefix}/layer{k}/weight"))?;
            let b = self.require(&format!("{prefix}/layer{k}/bias"))?;
            if w.shape != [spec.out_dim, spec.in_dim] || b.shape != [spec.out_dim] {
                return Err(Error::Format(format!(
                    "layer {k} of '{prefix}' has inconsistent shapes"
                )));
            }
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
            specs.push(spec);
        }
        Mlp::new(specs, params)
    }
}

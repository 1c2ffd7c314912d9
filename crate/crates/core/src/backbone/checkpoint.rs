//! Flat binary checkpoint format.
//!
//! ```text
//! "DCARCKPT" | version u32 | tensor count u32 |
//!   per tensor: name len u16 | name bytes | rank u8 | dims u32 × rank | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

use super::{BackboneConfig, BackboneParams};

pub const MAGIC: &[u8; 8] = b"DCARCKPT";
pub const VERSION: u32 = 1;

const CONFIG_TENSOR: &str = "meta.backbone_config";
const FROZEN_TENSOR: &str = "meta.backbone_frozen";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn put(&mut self, entry: TensorEntry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn insert_mat(&mut self, name: &str, m: &Mat<f32>) {
        self.put(TensorEntry {
            name: name.to_string(),
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().to_vec(),
        });
    }

    pub fn insert_vector(&mut self, name: &str, v: Vec<f32>) {
        self.put(TensorEntry {
            name: name.to_string(),
            dims: vec![v.len() as u32],
            data: v,
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Rank-1 tensors come back as a single row.
    pub fn get_mat(&self, name: &str) -> Result<Mat<f32>> {
        let e = self.get(name)?;
        let (r, c) = match e.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            d => return Err(Error::Checkpoint(format!("{name}: unsupported rank {}", d.len()))),
        };
        Mat::from_vec(r, c, e.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(TensorEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl BackboneParams<f32> {
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        let dims = self.config.to_dims().into_iter().map(|d| d as f32).collect();
        ckpt.insert_vector(CONFIG_TENSOR, dims);
        ckpt.insert_vector(FROZEN_TENSOR, vec![if self.is_frozen() { 1.0 } else { 0.0 }]);
        for (name, m) in self.named_tensors() {
            ckpt.insert_mat(&format!("backbone.{name}"), m);
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let dims: Vec<usize> = ckpt.get(CONFIG_TENSOR)?.data.iter().map(|&d| d as usize).collect();
        let config = BackboneConfig::from_dims(&dims)?;
        let mut params = BackboneParams::init(config, 0)?;
        for (name, slot) in params.named_tensors_mut() {
            let m = ckpt.get_mat(&format!("backbone.{name}"))?;
            if m.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?} does not match config shape {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        if ckpt.get(FROZEN_TENSOR)?.data.first() == Some(&1.0) {
            params.freeze();
        }
        Ok(params)
    }

    /// Serialized bytes of the backbone alone, for bit-exactness comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Checkpoint::new();
        self.write_to(&mut c);
        c.to_bytes()
    }
}

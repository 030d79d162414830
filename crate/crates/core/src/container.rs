//! Versioned binary container shared by every on-disk artifact.
//!
//! All integers are little endian.
//!
//! ```text
//! file    := magic[8] version:u32 count:u32 section*count
//! section := tag[4] name_len:u32 name[name_len] payload_len:u64 payload
//! ```
//!
//! Tensor payloads are `count:u32 tensor*count` with
//! `tensor := name_len:u32 name rank:u32 dim:u64*rank value:f64*prod(dims)`.
//! JSON payloads are UTF-8 text.

use std::collections::BTreeMap;
use std::path::Path;

use protoprompt_autodiff::Tensor;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub name: String,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(magic: [u8; 8]) -> Self {
        Self {
            magic,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: &[u8; 4], name: impl Into<String>, payload: Vec<u8>) {
        self.sections.push(Section {
            tag: *tag,
            name: name.into(),
            payload,
        });
    }

    pub fn push_json<T: serde::Serialize>(&mut self, tag: &[u8; 4], name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value).map_err(|e| Error::Format(e.to_string()))?;
        self.push(tag, name, bytes);
        Ok(())
    }

    pub fn push_tensors(&mut self, tag: &[u8; 4], name: &str, tensors: &[(String, &Tensor)]) {
        self.push(tag, name, encode_tensors(tensors));
    }

    pub fn find(&self, tag: &[u8; 4], name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| &s.tag == tag && s.name == name)
    }

    pub fn require(&self, tag: &[u8; 4], name: &str) -> Result<&Section> {
        self.find(tag, name).ok_or_else(|| {
            Error::Format(format!(
                "missing section {}/{}",
                String::from_utf8_lossy(tag),
                name
            ))
        })
    }

    pub fn sections_with_tag<'a>(&'a self, tag: &'a [u8; 4]) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| &s.tag == tag)
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, tag: &[u8; 4], name: &str) -> Result<T> {
        let s = self.require(tag, name)?;
        serde_json::from_slice(&s.payload).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn tensors(&self, tag: &[u8; 4], name: &str) -> Result<BTreeMap<String, Tensor>> {
        decode_tensors(&self.require(tag, name)?.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 8] = r.take(8)?.try_into().unwrap();
        if &magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(expected_magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let name = r.string()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            sections.push(Section { tag, name, payload });
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        Ok(Self { magic, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_magic: &[u8; 8]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, expected_magic)
    }
}

pub fn encode_tensors(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::try_new(shape, data).map_err(Error::Format)?;
        out.insert(name, t);
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes in tensor payload".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

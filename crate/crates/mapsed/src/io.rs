//! Self-describing binary container used by dataset and checkpoint files.
//!
//! Layout (all integers little-endian, all floats IEEE-754 f64 LE):
//!
//! ```text
//! magic        8 bytes (caller-chosen, e.g. b"MAPSEDC1")
//! version      u32
//! config_echo  string
//! meta_count   u32
//!   meta entry: key string, value string     (x meta_count)
//! tensor_count u32
//!   tensor entry: name string, ndim u32, dims u32 x ndim,
//!                 data f64 x product(dims)    (x tensor_count)
//!
//! string: len u32, then len bytes of UTF-8
//! ```
//!
//! Readers enforce hard caps (string 1 MiB, ndim 8, 2^26 elements per
//! tensor, 2^20 tensors) so malformed or hostile input cannot trigger
//! huge allocations.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

const MAX_STRING: usize = 1 << 20;
const MAX_NDIM: usize = 8;
const MAX_ELEMS: usize = 1 << 26;
const MAX_TENSORS: usize = 1 << 20;
const MAX_META: usize = 1 << 16;

/// Decoded container contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub config_echo: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Parse(format!("container missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Parse("unexpected end of data".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > MAX_STRING {
        return Err(Error::Parse(format!("string length {len} exceeds cap")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Parse("unexpected end of string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Parse("invalid UTF-8 in string".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = read_u32(r)? as usize;
    if ndim > MAX_NDIM {
        return Err(Error::Parse(format!("tensor rank {ndim} exceeds cap")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut elems: usize = 1;
    for _ in 0..ndim {
        let d = read_u32(r)? as usize;
        elems = elems
            .checked_mul(d)
            .ok_or_else(|| Error::Parse("tensor element count overflow".into()))?;
        if elems > MAX_ELEMS {
            return Err(Error::Parse(format!("tensor with {elems}+ elements exceeds cap")));
        }
        shape.push(d);
    }
    let mut data = Vec::with_capacity(elems);
    let mut buf = [0u8; 8];
    for _ in 0..elems {
        r.read_exact(&mut buf).map_err(|_| Error::Parse("unexpected end of tensor data".into()))?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_container(w: &mut impl Write, magic: &[u8; 8], c: &Container) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, VERSION)?;
    write_str(w, &c.config_echo)?;
    write_u32(w, c.meta.len() as u32)?;
    for (k, v) in &c.meta {
        write_str(w, k)?;
        write_str(w, v)?;
    }
    write_u32(w, c.tensors.len() as u32)?;
    for (name, t) in &c.tensors {
        write_str(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_container(r: &mut impl Read, magic: &[u8; 8]) -> Result<Container> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(|_| Error::Parse("file too short for magic".into()))?;
    if &got != magic {
        return Err(Error::Parse(format!(
            "bad magic: expected {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported container version {version}")));
    }
    let config_echo = read_str(r)?;
    let meta_count = read_u32(r)? as usize;
    if meta_count > MAX_META {
        return Err(Error::Parse("meta count exceeds cap".into()));
    }
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let k = read_str(r)?;
        let v = read_str(r)?;
        meta.push((k, v));
    }
    let tensor_count = read_u32(r)? as usize;
    if tensor_count > MAX_TENSORS {
        return Err(Error::Parse("tensor count exceeds cap".into()));
    }
    let mut tensors = Vec::with_capacity(tensor_count.min(1024));
    for _ in 0..tensor_count {
        let name = read_str(r)?;
        let t = read_tensor(r)?;
        tensors.push((name, t));
    }
    Ok(Container { config_echo, meta, tensors })
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_container_atomic(path: &Path, magic: &[u8; 8], c: &Container) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_container(&mut f, magic, c)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container_file(path: &Path, magic: &[u8; 8]) -> Result<Container> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    read_container(&mut f, magic)
}

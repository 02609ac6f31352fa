//! Binary container for named tensors, shared by model checkpoints,
//! per-utterance feature files, and persisted soft targets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "ACDM"
//! version u16      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8), rank u8, dims rank x u32,
//!   data product(dims) x f64
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"ACDM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (not an ACDM container)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("tensor {0:?} not found in container")]
    Missing(String),
}

/// An ordered set of named tensors.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.dims().len() as u8).to_le_bytes())?;
            for &d in tensor.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Container, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| ContainerError::Malformed(format!("tensor name: {e}")))?;
            let mut rank_buf = [0u8; 1];
            r.read_exact(&mut rank_buf)?;
            let rank = rank_buf[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0.0f64; len];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::from_vec(&dims, data)
                .map_err(|e| ContainerError::Malformed(format!("tensor {name:?}: {e}")))?;
            entries.push((name, tensor));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container, ContainerError> {
        let bytes = fs::read(path)?;
        Container::read_from(&mut bytes.as_slice())
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, ContainerError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

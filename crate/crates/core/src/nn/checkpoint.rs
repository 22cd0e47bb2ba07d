//! Named parameters and the flat binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u32 parameter count, then per
//! parameter: u16 name length, UTF-8 name, u8 rank, u32 dims, f64 values.
//! All integers and floats little-endian, so files are byte-stable across
//! platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 8] = b"MAGLVCK1";
const VERSION: u32 = 1;

/// A named tensor owned by a model layer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and other frozen state are tracked but not updated
    /// by the optimizer.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable,
        }
    }

    pub fn count(&self) -> usize {
        self.value.len()
    }
}

pub fn save_checkpoint(path: &Path, params: &[&Parameter]) -> Result<(), NnError> {
    let file = File::create(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| NnError::Io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8]).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Parameter>, NnError> {
    let file = File::open(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| NnError::Io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(NnError::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut buf4).map_err(io)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2).map_err(io)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::Format(format!("{}: invalid parameter name", path.display())))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut buf4).map_err(io)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf8).map_err(io)?;
            data.push(f64::from_le_bytes(buf8));
        }
        params.push(Parameter::new(name, Tensor::new(shape, data)?, true));
    }
    Ok(params)
}

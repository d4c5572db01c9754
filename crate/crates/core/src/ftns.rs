//! Raw tensor container: the 4-byte magic `FTNS`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dims, then the little-endian `f32`
//! payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTNS";

/// Array of any rank as stored in an FTNS file. Zero-length dims are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape("ftns", format!("{expected} values for dims {dims:?}"), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::from_shape(&self.dims, self.data)
    }
}

impl From<&Tensor> for RawArray {
    fn from(t: &Tensor) -> Self {
        Self { dims: t.dims().to_vec(), data: t.data().to_vec() }
    }
}

pub fn encode(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::shape("ftns", format!("{expected} values for dims {dims:?}"), data.len()));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("ftns", format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_to(mut w: impl Write, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    let bytes = encode(dims, data).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&bytes)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses an FTNS byte stream. `origin` is used in error messages only.
pub fn read_from(mut r: impl Read, origin: &Path) -> Result<RawArray> {
    let malformed = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| malformed(format!("header: {e}")))?;
    if &magic != MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r).map_err(|e| malformed(format!("rank: {e}")))? as usize;
    if rank > 16 {
        return Err(malformed(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r).map_err(|e| malformed(format!("dims: {e}")))? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(format!("dims {dims:?} overflow")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| malformed(e.to_string()))?;
    if payload.len() != count * 4 {
        return Err(malformed(format!("payload of {} bytes, expected {} for dims {dims:?}", payload.len(), count * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(RawArray { dims, data })
}

pub fn save(path: impl AsRef<Path>, dims: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(dims, data)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<RawArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_from(bytes.as_slice(), path)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save(path, &t.dims().to_vec(), t.data())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    load(path)?.into_tensor()
}

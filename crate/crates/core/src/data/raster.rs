//! Binary raster files.
//!
//! Layout: magic `CMRD`, version `u32`, dtype tag `u8` (0 = f64, 1 = u8),
//! rank `u32`, one `u32` per dimension, then the little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMRD";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::U8 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Decoded raster contents.
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    F64(Tensor),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

fn header(dtype: DType, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = header(DType::F64, t.shape());
    out.reserve(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Labels are stored as rank-2 `H x W` u8 rasters.
pub fn encode_labels(m: &LabelMap) -> Vec<u8> {
    let mut out = header(DType::U8, &[m.height, m.width]);
    out.extend_from_slice(&m.data);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("raster header is truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a raster file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported raster version {version}")));
    }
    let dtype = match r.take(1)?[0] {
        0 => DType::F64,
        1 => DType::U8,
        t => return Err(Error::Format(format!("unknown raster dtype tag {t}"))),
    };
    let rank = r.u32()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let expected = dims.iter().product::<usize>() * dtype.size();
    let payload = &bytes[r.pos..];
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            found: payload.len(),
        });
    }
    Ok(match dtype {
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Raster::F64(Tensor::new(dims, data)?)
        }
        DType::U8 => Raster::U8 {
            dims,
            data: payload.to_vec(),
        },
    })
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn save_labels(path: &Path, m: &LabelMap) -> Result<()> {
    fs::write(path, encode_labels(m))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    match decode(&fs::read(path)?)? {
        Raster::F64(t) => Ok(t),
        Raster::U8 { .. } => Err(Error::Format(format!(
            "{} holds labels, expected a float raster",
            path.display()
        ))),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    match decode(&fs::read(path)?)? {
        Raster::U8 { dims, data } => match dims.as_slice() {
            &[h, w] => LabelMap::new(h, w, data),
            d => Err(Error::Format(format!("label raster of rank {}", d.len()))),
        },
        Raster::F64(_) => Err(Error::Format(format!(
            "{} holds floats, expected a label raster",
            path.display()
        ))),
    }
}

//! `DQT1` binary tensor container.
//!
//! Layout: magic `DQT1` (bytes 0-3), dtype code (byte 4: 0 = f64, 1 = i32),
//! ndim (byte 5), two zero padding bytes, `ndim` little-endian `u64` dims,
//! then the row-major payload in little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"DQT1";
const HEADER_LEN: usize = 8;

/// A tensor as stored in a `DQT1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F64(Tensor),
    I32(IntTensor),
}

impl Stored {
    fn dtype(&self) -> u8 {
        match self {
            Stored::F64(_) => 0,
            Stored::I32(_) => 1,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Stored::F64(t) => t.shape(),
            Stored::I32(t) => t.shape(),
        }
    }

    pub fn into_f64(self) -> Result<Tensor> {
        match self {
            Stored::F64(t) => Ok(t),
            Stored::I32(_) => Err(Error::Format("expected an f64 tensor, found i32".into())),
        }
    }

    pub fn into_i32(self) -> Result<IntTensor> {
        match self {
            Stored::I32(t) => Ok(t),
            Stored::F64(_) => Err(Error::Format("expected an i32 tensor, found f64".into())),
        }
    }
}

pub fn encode(tensor: &Stored) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    let ndim = u8::try_from(shape.len())
        .map_err(|_| Error::Format(format!("{} dimensions exceed the format limit", shape.len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(tensor.dtype());
    out.push(ndim);
    out.extend_from_slice(&[0, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match tensor {
        Stored::F64(t) => {
            out.reserve(8 * t.len());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Stored::I32(t) => {
            out.reserve(4 * t.len());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Stored> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DQT1 magic".into()));
    }
    let dtype = bytes[4];
    let ndim = bytes[5] as usize;
    if bytes[6..8] != [0, 0] {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dimension list".into()));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
    let payload = &bytes[dims_end..];
    match dtype {
        0 => {
            if payload.len() != numel * 8 {
                return Err(Error::Format(format!(
                    "payload holds {} bytes, expected {}",
                    payload.len(),
                    numel * 8
                )));
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Stored::F64(Tensor::new(shape, data)?))
        }
        1 => {
            if payload.len() != numel * 4 {
                return Err(Error::Format(format!(
                    "payload holds {} bytes, expected {}",
                    payload.len(),
                    numel * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Stored::I32(IntTensor::new(shape, data)?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn write(path: impl AsRef<Path>, tensor: &Stored) -> Result<()> {
    fs::write(path, encode(tensor)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Stored> {
    decode(&fs::read(path)?)
}

pub fn write_f64(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    write(path, &Stored::F64(tensor.clone()))
}

pub fn read_f64(path: impl AsRef<Path>) -> Result<Tensor> {
    read(path)?.into_f64()
}

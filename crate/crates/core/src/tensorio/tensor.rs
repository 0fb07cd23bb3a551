//! Dense row-major tensors and the `ADT1` container format.
//!
//! Layout of a tensor file, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ADT1"
//! 4       1           dtype code (0 = f32, 1 = f64)
//! 5       1           ndim
//! 6       4 * ndim    dims, u32 each
//! ...     n * width   elements, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ADT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense tensor. Elements are held in double precision regardless of the
/// storage dtype; an `F32` tensor only ever holds values exactly
/// representable in single precision, so a round trip through a file is
/// bitwise exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

impl Tensor {
    /// Double precision tensor; validates shape, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F64, shape, data)
    }

    /// Single precision tensor. Values are rounded to the nearest `f32`.
    pub fn new_f32(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F32, shape, data)
    }

    pub fn with_dtype(dtype: DType, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        check_finite(&data)?;
        if dtype == DType::F32 {
            for (i, v) in data.iter_mut().enumerate() {
                let r = *v as f32;
                if !r.is_finite() {
                    return Err(Error::NonFinite(i));
                }
                *v = r as f64;
            }
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Ok(Tensor {
            dtype: DType::F64,
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(6 + 4 * self.shape.len() + self.data.len() * self.dtype.width());
        out.extend_from_slice(&MAGIC);
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            let mut magic = [0u8; 4];
            let n = bytes.len().min(4);
            magic[..n].copy_from_slice(&bytes[..n]);
            if magic[..n] != MAGIC[..n] {
                return Err(Error::BadMagic(magic));
            }
            return Err(Error::Truncated {
                expected: 6,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
            .collect();
        let count = element_count(&shape)?;
        let expected = header + count * dtype.width();
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::LengthMismatch {
                shape,
                expected: count,
                found: (bytes.len() - header) / dtype.width(),
            });
        }
        let payload = &bytes[header..];
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        check_finite(&data)?;
        Ok(Tensor { dtype, shape, data })
    }

    /// Reinterprets the element sequence under a new shape of the same size.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                found: self.data.len(),
            });
        }
        Ok(Tensor { shape, ..self })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

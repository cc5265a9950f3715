//! Single-tensor binary container.
//!
//! Layout: `b"CAVT"`, version `u16` LE, dtype `u8` (0 f32, 1 f64, 2 u8),
//! ndim `u8`, `ndim` dims as `u32` LE, then the row-major payload in LE.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CAVT";
pub const VERSION: u16 = 1;

/// A decoded container with its payload still typed by `dtype`.
#[derive(Clone, Debug, PartialEq)]
pub enum CavtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CavtTensor {
    pub shape: Vec<usize>,
    pub data: CavtData,
}

impl CavtTensor {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        CavtTensor {
            shape: shape.to_vec(),
            data: CavtData::F32(data),
        }
    }

    pub fn u8(shape: &[usize], data: Vec<u8>) -> Self {
        CavtTensor {
            shape: shape.to_vec(),
            data: CavtData::U8(data),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => CavtData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => CavtData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        CavtTensor {
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn dtype_code(&self) -> u8 {
        match self.data {
            CavtData::F32(_) => 0,
            CavtData::F64(_) => 1,
            CavtData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            CavtData::F32(v) => v.len(),
            CavtData::F64(v) => v.len(),
            CavtData::U8(v) => v.len(),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            CavtData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected an f32 tensor".into())),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            CavtData::U8(v) => Ok(v),
            _ => Err(Error::Format("expected a u8 tensor".into())),
        }
    }

    /// Float payloads as a tensor of any scalar type.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let vals: Vec<T> = match &self.data {
            CavtData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            CavtData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            CavtData::U8(_) => return Err(Error::Format("u8 payload is not a float tensor".into())),
        };
        Tensor::new(self.shape.clone(), vals)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "{} dims exceed the header limit",
                self.shape.len()
            )));
        }
        let numel: usize = self.shape.iter().product();
        if numel != self.len() {
            return Err(Error::Format(format!(
                "shape {:?} holds {numel} values, payload has {}",
                self.shape,
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + numel * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype_code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            CavtData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            CavtData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            CavtData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing CAVT magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported CAVT version {version}")));
        }
        let dtype = bytes[6];
        let ndim = bytes[7] as usize;
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated CAVT header"));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = 8 + 4 * i;
                u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
            })
            .collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("CAVT shape overflows"))?;
        let payload = &bytes[header..];
        let width = match dtype {
            0 => 4,
            1 => 8,
            2 => 1,
            _ => return Err(Error::Format(format!("unknown CAVT dtype {dtype}"))),
        };
        if payload.len() != numel * width {
            return Err(Error::Format(format!(
                "CAVT payload is {} bytes, shape {:?} needs {}",
                payload.len(),
                shape,
                numel * width
            )));
        }
        let data = match dtype {
            0 => CavtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => CavtData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => CavtData::U8(payload.to_vec()),
        };
        Ok(CavtTensor { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

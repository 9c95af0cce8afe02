//! `GZT1` tensor records.
//!
//! Layout (little-endian): magic `b"GZT1"`, u8 dtype code (0 = f64, 1 = f32),
//! u8 rank, `rank` × u32 dims, then the values in row-major order.

use std::io::{ErrorKind, Read, Write};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GZT1";

/// A tensor read from disk before it is converted to the caller's dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::F32(_) => DType::F32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::F32(t) => t.shape(),
        }
    }

    /// Converts to `T`, casting if the stored dtype differs.
    pub fn into_dtype<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F64(t) => t.cast(),
            AnyTensor::F32(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it was stored as `T`.
    pub fn into_exact<T: Element>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(TensorError::Corrupt(format!(
                "expected {} record, found {}",
                T::DTYPE,
                self.dtype()
            )));
        }
        Ok(self.into_dtype())
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    assert!(t.rank() <= u8::MAX as usize, "rank {} too large", t.rank());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => TensorError::Truncated,
        _ => TensorError::Io(e),
    })
}

pub fn read_tensor_any<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Corrupt(format!(
            "bad magic {:?}, expected \"GZT1\"",
            String::from_utf8_lossy(&head[..4])
        )));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| TensorError::Corrupt(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut dims_raw = vec![0u8; rank * 4];
    read_exact(r, &mut dims_raw)?;
    let shape: Vec<usize> = dims_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(dtype.size_of()).is_some_and(|b| b < (1 << 40)))
        .ok_or_else(|| TensorError::Corrupt(format!("implausible shape {shape:?}")))?;
    let mut raw = vec![0u8; numel * dtype.size_of()];
    read_exact(r, &mut raw)?;
    Ok(match dtype {
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )?),
    })
}

/// Reads one record and converts it to `T`.
pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    Ok(read_tensor_any(r)?.into_dtype())
}

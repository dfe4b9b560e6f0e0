//! `HTF1` tensor container: magic, dtype byte, four little-endian `u32`
//! dims, then raw little-endian scalars in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const HTF_MAGIC: &[u8; 4] = b"HTF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
            other => Err(Error::Format(format!("unknown HTF dtype byte {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor read from disk in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when it already matches).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_htf<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(21 + t.len() * T::DTYPE.width());
    buf.extend_from_slice(HTF_MAGIC);
    buf.push(T::DTYPE.code());
    for d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_vec(&mut buf);
    }
    w.write_all(&buf)
}

fn read_exact_fmt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated HTF stream while reading {what}: {e}")))
}

pub fn read_htf<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    read_exact_fmt(&mut r, &mut magic, "magic")?;
    if &magic != HTF_MAGIC {
        return Err(Error::Format(format!("bad HTF magic {magic:02x?}")));
    }
    let mut code = [0u8; 1];
    read_exact_fmt(&mut r, &mut code, "dtype")?;
    let dtype = DType::from_code(code[0])?;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        let mut b = [0u8; 4];
        read_exact_fmt(&mut r, &mut b, "dims")?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let count: usize = shape.iter().product();
    let mut raw = vec![0u8; count * dtype.width()];
    read_exact_fmt(&mut r, &mut raw, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(shape, &raw)?),
        DType::F64 => AnyTensor::F64(decode(shape, &raw)?),
    })
}

fn decode<T: Scalar>(shape: [usize; 4], raw: &[u8]) -> Result<Tensor<T>> {
    let data = raw.chunks_exact(T::DTYPE.width()).map(T::from_le_slice).collect();
    Tensor::new(shape, data)
}

pub fn write_htf_file<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_htf(t, &mut buf).map_err(|e| Error::io(path.as_ref(), e))?;
    write_atomic(path.as_ref(), &buf)
}

pub fn read_htf_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_htf(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([1, 2, 1, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_htf(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"HTF1");
        assert_eq!(buf[4], 0);
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[21..25], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 21 + 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_htf(&b"HTF2\0"[..]), Err(Error::Format(_))));
        assert!(matches!(read_htf(&b"HTF1\x07"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_htf(&Tensor::<f64>::zeros([1, 1, 2, 2]), &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_htf(buf.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let shape = [dims.0, dims.1, dims.2, dims.3];
            let mut state = seed;
            let t64 = Tensor::<f64>::from_fn(shape, |_, _, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits((state >> 2) | 0x3000_0000_0000_0000)
            });
            let mut buf = Vec::new();
            write_htf(&t64, &mut buf).unwrap();
            prop_assert_eq!(read_htf(buf.as_slice()).unwrap(), AnyTensor::F64(t64.clone()));

            let t32: Tensor<f32> = t64.cast();
            let mut buf = Vec::new();
            write_htf(&t32, &mut buf).unwrap();
            let back = read_htf(buf.as_slice()).unwrap().into_tensor::<f32>();
            prop_assert!(back.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

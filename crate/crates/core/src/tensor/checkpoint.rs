//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  b"APNCKPT\0"
//! version  u8       1
//! repeated until end of file:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   dtype     u8      0 = f32, 1 = f64
//!   rank      u32
//!   extents   rank x u64
//!   data      product(extents) values, raw little-endian
//! ```

use std::io::{Read, Write};

use super::{numel_of, Element, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"APNCKPT\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

/// A checkpoint record of either precision.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested precision (exact when dtypes match).
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn encode_record<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, AnyTensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for (name, t) in records {
        match t {
            AnyTensor::F32(t) => encode_record(&mut buf, name, t),
            AnyTensor::F64(t) => encode_record(&mut buf, name, t),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_data<T: Element>(raw: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(data, shape)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, AnyTensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_tag(cur.take(1)?[0])?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let raw = cur.take(numel_of(&shape) * dtype.size())?;
        let t = match dtype {
            DType::F32 => AnyTensor::F32(decode_data(raw, &shape)?),
            DType::F64 => AnyTensor::F64(decode_data(raw, &shape)?),
        };
        out.push((name, t));
    }
    Ok(out)
}

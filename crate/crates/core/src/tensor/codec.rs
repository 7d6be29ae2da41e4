//! Little-endian binary encoding of tensors, shared by the wire protocol and
//! the checkpoint format.
//!
//! A tensor is `dtype u8, rank u8, dims u64[rank]` followed by the element
//! payload. Numeric elements are raw little-endian; bools are one byte each;
//! strings are a u64 byte length followed by UTF-8 bytes.

use super::{Buffer, DType, Shape, Tensor};
use crate::error::{Error, Result};

/// Cursor over a byte slice. Every read is bounds checked.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Wire(format!(
                "truncated input: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    /// u32 length-prefixed UTF-8 string.
    pub fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Wire(format!("invalid utf-8: {e}")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Wire(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Writes the dtype/rank/dims header.
pub fn write_header(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid(format!("rank {} too large to encode", t.rank())));
    }
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

pub fn read_header(r: &mut Reader<'_>) -> Result<(DType, Shape)> {
    let code = r.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Wire(format!("unknown dtype code {code}")))?;
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.u64()?;
        dims.push(usize::try_from(d).map_err(|_| Error::Wire(format!("dimension {d} too large")))?);
    }
    Ok((dtype, Shape::new(dims)))
}

/// Appends the element payload only.
pub fn write_data(out: &mut Vec<u8>, t: &Tensor) {
    match t.buffer() {
        Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Buffer::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Buffer::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Buffer::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Buffer::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        Buffer::Str(v) => {
            for s in v {
                out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

/// Length in bytes of the payload [`write_data`] would produce.
pub fn data_len(t: &Tensor) -> usize {
    match t.buffer() {
        Buffer::Str(v) => v.iter().map(|s| 8 + s.len()).sum(),
        b => b.len() * b.dtype().size_of(),
    }
}

fn fixed<const N: usize, T>(r: &mut Reader<'_>, n: usize, f: fn([u8; N]) -> T) -> Result<Vec<T>> {
    let need = n.checked_mul(N).ok_or_else(|| Error::Wire("element count overflow".into()))?;
    let raw = r.bytes(need)?;
    Ok(raw
        .chunks_exact(N)
        .map(|c| f(c.try_into().expect("chunk size")))
        .collect())
}

pub fn read_data(r: &mut Reader<'_>, dtype: DType, shape: Shape) -> Result<Tensor> {
    let n = shape.num_elements();
    let buf = match dtype {
        DType::F32 => Buffer::F32(fixed(r, n, f32::from_le_bytes)?),
        DType::F64 => Buffer::F64(fixed(r, n, f64::from_le_bytes)?),
        DType::I32 => Buffer::I32(fixed(r, n, i32::from_le_bytes)?),
        DType::I64 => Buffer::I64(fixed(r, n, i64::from_le_bytes)?),
        DType::Bool => {
            let raw = r.bytes(n)?;
            let mut v = Vec::with_capacity(n);
            for &b in raw {
                match b {
                    0 => v.push(false),
                    1 => v.push(true),
                    other => return Err(Error::Wire(format!("invalid bool byte {other}"))),
                }
            }
            Buffer::Bool(v)
        }
        DType::String => {
            let mut v = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let len = usize::try_from(r.u64()?).map_err(|_| Error::Wire("string too long".into()))?;
                let b = r.bytes(len)?;
                v.push(String::from_utf8(b.to_vec()).map_err(|e| Error::Wire(format!("invalid utf-8: {e}")))?);
            }
            Buffer::Str(v)
        }
    };
    Tensor::from_buffer(shape, buf)
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    write_header(out, t)?;
    write_data(out, t);
    Ok(())
}

pub fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let (dtype, shape) = read_header(r)?;
    read_data(r, dtype, shape)
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(2 + 8 * t.rank() + data_len(t));
    write_tensor(&mut out, t)?;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

//! Single-tensor files: magic `FTT0`, rank `u8`, dims `u32`, then
//! little-endian `f32` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use tlrate_core::Tensor;

use crate::error::{io_at, Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"FTT0";

/// Writes rank, dims and data (no magic).
pub(crate) fn write_body(out: &mut Vec<u8>, tensor: &Tensor) -> Result<()> {
    let rank = u8::try_from(tensor.shape().len()).map_err(|_| Error::Format {
        what: "tensor",
        reason: format!("rank {} exceeds 255", tensor.shape().len()),
    })?;
    out.push(rank);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format {
            what: "tensor",
            reason: format!("dimension {d} exceeds u32"),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Cursor over a byte slice whose reads fail with `None` past the end.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self) -> Option<[u8; 4]> {
        self.take(4).map(|b| [b[0], b[1], b[2], b[3]])
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// Rank, dims and data; `None` when the buffer runs out.
    pub(crate) fn tensor_body(&mut self) -> Option<Result<Tensor>> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let Some(len) = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) else {
            return Some(Err(Error::Format {
                what: "tensor",
                reason: format!("shape {shape:?} overflows"),
            }));
        };
        let bytes = self.take(len.checked_mul(4)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Some(Tensor::new(shape, data).map_err(Error::from))
    }
}

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(9 + 4 * tensor.shape().len() + 4 * tensor.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    write_body(&mut out, tensor)?;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let truncated = || Error::Format {
        what: "tensor file",
        reason: "unexpected end of file".into(),
    };
    let magic = r.magic().ok_or_else(truncated)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            what: "tensor file",
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let tensor = r.tensor_body().ok_or_else(truncated)??;
    if !r.is_at_end() {
        return Err(Error::Format {
            what: "tensor file",
            reason: "trailing bytes".into(),
        });
    }
    Ok(tensor)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_tensor(tensor)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(io_at(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_at(path))?;
    decode_tensor(&bytes)
}

//! Portable tensor files: `"LA2T"`, u32 version, u32 rank, `rank` u64 dims,
//! then row-major little-endian f64 values. All integers are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"LA2T";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(usize),
    #[error("invalid dims {0:?}")]
    BadDims(Vec<u64>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != TENSOR_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rank = c.u32()? as usize;
    let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| FormatError::BadDims(dims.clone()))?
        / 8;
    let raw = c.take(8 * numel)?;
    if c.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - c.pos));
    }
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, data).map_err(|_| FormatError::BadDims(dims))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    fs::write(path, encode_tensor(t)).map_err(|source| io_error(path, source))
}

pub fn load_tensor(path: &Path) -> Result<Tensor, FormatError> {
    let bytes = fs::read(path).map_err(|source| io_error(path, source))?;
    decode_tensor(&bytes)
}

fn io_error(path: &Path, source: io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -0.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"LA2T");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..28], &1u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| (i as f64).sin() * 1e-300);
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let s = Tensor::scalar(7.0);
        assert_eq!(decode_tensor(&encode_tensor(&s)).unwrap(), s);
    }

    #[test]
    fn malformed_inputs() {
        let good = encode_tensor(&Tensor::ones(&[4]));
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(FormatError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(FormatError::UnsupportedVersion(9))));
        assert!(matches!(
            decode_tensor(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(FormatError::TrailingBytes(1))));
        let mut huge = good[..8].to_vec();
        huge.extend_from_slice(&2u32.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&4u64.to_le_bytes());
        assert!(matches!(decode_tensor(&huge), Err(FormatError::BadDims(_))));
    }
}

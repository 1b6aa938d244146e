//! Binary array container used for feature files and checkpoint parameters.
//!
//! Layout: 4-byte magic, u16 row count, u16 column count (little-endian),
//! then row-major little-endian floats. Magic `HSUM` marks an f32 payload
//! (feature files); `HSM8` marks the f64 variant used for model parameters,
//! where round-tripping must preserve exact bits.

use crate::error::{HsumError, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC_F32: &[u8; 4] = b"HSUM";
pub const MAGIC_F64: &[u8; 4] = b"HSM8";

pub(crate) const HEADER_LEN: usize = 8;

fn header(magic: &[u8; 4], rows: usize, cols: usize) -> Result<[u8; HEADER_LEN]> {
    let r = u16::try_from(rows)
        .map_err(|_| HsumError::Shape(format!("row count {rows} exceeds u16 range")))?;
    let c = u16::try_from(cols)
        .map_err(|_| HsumError::Shape(format!("column count {cols} exceeds u16 range")))?;
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(magic);
    h[4..6].copy_from_slice(&r.to_le_bytes());
    h[6..8].copy_from_slice(&c.to_le_bytes());
    Ok(h)
}

fn parse_header(path: &Path, buf: &[u8], magic: &[u8; 4]) -> Result<(usize, usize)> {
    if buf.len() < HEADER_LEN {
        return Err(HsumError::Format {
            path: path.to_path_buf(),
            reason: format!("file too short for header ({} bytes)", buf.len()),
        });
    }
    if &buf[..4] != magic {
        return Err(HsumError::Format {
            path: path.to_path_buf(),
            reason: format!(
                "bad magic {:?}, expected {:?}",
                &buf[..4],
                std::str::from_utf8(magic).unwrap()
            ),
        });
    }
    let rows = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    let cols = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    Ok((rows, cols))
}

/// Serialize an f32 matrix into the `HSUM` container.
pub fn encode_f32(arr: &Array2<f32>) -> Result<Vec<u8>> {
    let (rows, cols) = arr.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&header(MAGIC_F32, rows, cols)?);
    for v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Deserialize an f32 matrix from `HSUM` bytes. `path` is used for error context only.
pub fn decode_f32(path: &Path, buf: &[u8]) -> Result<Array2<f32>> {
    let (rows, cols) = parse_header(path, buf, MAGIC_F32)?;
    let expected = HEADER_LEN + rows * cols * 4;
    if buf.len() != expected {
        return Err(HsumError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes for {rows}x{cols} f32, got {}", buf.len()),
        });
    }
    let data: Vec<f32> = buf[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| HsumError::Shape(format!("{}: {e}", path.display())))
}

/// Serialize an f64 matrix into the `HSM8` container.
pub fn encode_f64(arr: &Array2<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = arr.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(&header(MAGIC_F64, rows, cols)?);
    for v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Deserialize an f64 matrix from `HSM8` bytes.
pub fn decode_f64(path: &Path, buf: &[u8]) -> Result<Array2<f64>> {
    let (rows, cols) = parse_header(path, buf, MAGIC_F64)?;
    let expected = HEADER_LEN + rows * cols * 8;
    if buf.len() != expected {
        return Err(HsumError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes for {rows}x{cols} f64, got {}", buf.len()),
        });
    }
    let data: Vec<f64> = buf[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| HsumError::Shape(format!("{}: {e}", path.display())))
}

/// Write an f32 matrix to `path` in the `HSUM` format.
pub fn write_f32(path: &Path, arr: &Array2<f32>) -> Result<()> {
    let bytes = encode_f32(arr)?;
    let mut f = std::fs::File::create(path).map_err(|e| HsumError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HsumError::io(path, e))
}

/// Read an f32 matrix from a `HSUM` file.
pub fn read_f32(path: &Path) -> Result<Array2<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| HsumError::io(path, e))?;
    decode_f32(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("<mem>")
    }

    #[test]
    fn f32_round_trip() {
        let a = array![[1.0f32, -2.5, 3.25], [0.0, f32::MIN_POSITIVE, 1e30]];
        let bytes = encode_f32(&a).unwrap();
        assert_eq!(&bytes[..4], MAGIC_F32);
        assert_eq!(bytes.len(), 8 + 6 * 4);
        let b = decode_f32(&p(), &bytes).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f64_round_trip_exact_bits() {
        let a = array![[std::f64::consts::PI, 1.0 / 3.0], [-0.0, 1e-300]];
        let bytes = encode_f64(&a).unwrap();
        let b = decode_f64(&p(), &bytes).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let a = array![[1.0f32]];
        let mut bytes = encode_f32(&a).unwrap();
        bytes[0] = b'X';
        let err = decode_f32(&p(), &bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let a = array![[1.0f32, 2.0]];
        let mut bytes = encode_f32(&a).unwrap();
        bytes.pop();
        assert!(decode_f32(&p(), &bytes).is_err());
    }

    #[test]
    fn f32_magic_is_rejected_by_f64_decoder() {
        let a = array![[1.0f32]];
        let bytes = encode_f32(&a).unwrap();
        assert!(decode_f64(&p(), &bytes).is_err());
    }

    #[test]
    fn oversized_dimensions_rejected() {
        let a = Array2::<f32>::zeros((70_000, 1));
        assert!(encode_f32(&a).is_err());
    }
}

//! `AVF1` feature matrices.
//!
//! ```text
//! "AVF1" | version u32 = 1 | rows u32 | cols u32 | rows*cols f64
//! ```
//! Little-endian, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const AVF_MAGIC: &[u8; 4] = b"AVF1";
pub const AVF_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    buf.extend_from_slice(AVF_MAGIC);
    buf.extend_from_slice(&AVF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != AVF_MAGIC {
            return Err(bad_magic(bytes, path));
        }
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != AVF_MAGIC {
        return Err(bad_magic(bytes, path));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != AVF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            expected: AVF_VERSION,
            found: version,
        });
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = HEADER_LEN + rows * cols * 8;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn bad_magic(bytes: &[u8], path: &Path) -> Error {
    Error::BadMagic {
        path: path.to_path_buf(),
        expected: "AVF1".into(),
        found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
    }
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

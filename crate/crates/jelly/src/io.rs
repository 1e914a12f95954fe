//! Binary float-matrix files shared by corpus features and mel output.
//!
//! Layout: 16-byte header (4-byte magic `JF32`, u32 version, u32 rows,
//! u32 cols, all little-endian) followed by rows x cols f32 values in
//! row-major order.

use ndarray::Array2;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"JF32";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MatrixFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a float-matrix file)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: String, found: u32 },
    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated { path: String, expected: usize, found: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> MatrixFileError {
    MatrixFileError::Io { path: path.display().to_string(), source }
}

/// Complete file image (header plus payload) for a matrix; callers that
/// record checksums hash exactly these bytes.
pub fn matrix_bytes(m: &Array2<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + m.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<(), MatrixFileError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&matrix_bytes(m)).map_err(|e| io_err(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>, MatrixFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    parse_matrix(&bytes, path)
}

/// Decodes an in-memory file image; `path` labels errors only. Callers that
/// verify checksums first use this to avoid a second read.
pub fn parse_matrix(bytes: &[u8], path: &Path) -> Result<Array2<f32>, MatrixFileError> {
    let p = || path.display().to_string();
    if bytes.len() < 16 || bytes[0..4] != MAGIC {
        return Err(MatrixFileError::BadMagic { path: p() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(MatrixFileError::UnsupportedVersion { path: p(), found: version });
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows * cols * 4;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(MatrixFileError::Truncated { path: p(), expected, found: payload.len() });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("header shape matches payload"))
}

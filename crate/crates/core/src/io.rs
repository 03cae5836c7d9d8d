//! Tensor blob and manifest I/O.
//!
//! All on-disk tensors are 32-bit IEEE-754 little-endian, row-major, one file
//! per named tensor. Manifests are UTF-8 JSON and carry SHA-256 checksums of
//! every blob so corruption is detected on load.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{EditError, Result};
use crate::num::Real;

pub fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_blob(path: &Path, data: &[f32]) -> Result<()> {
    fs::write(path, f32_bytes(data))?;
    Ok(())
}

pub fn read_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_len * 4 {
        return Err(EditError::Integrity(format!(
            "{}: expected {} f32 values, file holds {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn verify_checksum(path: &Path, expected: &str) -> Result<()> {
    let got = sha256_file(path)?;
    if got != expected {
        return Err(EditError::Integrity(format!(
            "{}: checksum {} does not match manifest {}",
            path.display(),
            got,
            expected
        )));
    }
    Ok(())
}

pub fn mat_to_f32<F: Real>(a: &Array2<F>) -> Vec<f32> {
    a.iter().map(|&v| v.to_f64() as f32).collect()
}

pub fn vec_to_f32<F: Real>(a: &Array1<F>) -> Vec<f32> {
    a.iter().map(|&v| v.to_f64() as f32).collect()
}

pub fn mat_from_f32<F: Real>(data: &[f32], rows: usize, cols: usize) -> Result<Array2<F>> {
    if data.len() != rows * cols {
        return Err(EditError::ShapeMismatch {
            expected: format!("{rows}x{cols}"),
            got: format!("{} values", data.len()),
        });
    }
    Ok(Array2::from_shape_vec(
        (rows, cols),
        data.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("shape matches data length"))
}

pub fn vec_from_f32<F: Real>(data: &[f32]) -> Array1<F> {
    Array1::from_iter(data.iter().map(|&v| F::from_f64(v as f64)))
}

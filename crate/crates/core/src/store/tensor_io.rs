//! The SAPT tensor container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SAPT"
//! 4       4     version, u32 little-endian (= 1)
//! 8       8     header_len, u64 little-endian
//! 16      n     UTF-8 JSON header {"dtype":"f32","shape":[...]}
//! 16+n    4*k   payload, k = product(shape) little-endian f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorOf;

pub const MAGIC: [u8; 4] = *b"SAPT";
pub const VERSION: u32 = 1;
/// Magic, version and header length.
pub const FIXED_PREFIX_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

/// Serializes a tensor into SAPT bytes.
pub fn encode_tensor(t: &TensorOf<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".to_string(),
        shape: t.shape().to_vec(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(FIXED_PREFIX_LEN + header.len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses SAPT bytes. `origin` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<TensorOf<f32>> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < FIXED_PREFIX_LEN {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected: FIXED_PREFIX_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Unsupported(format!(
            "{}: version {version}",
            origin.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[FIXED_PREFIX_LEN..];
    if (body.len() as u64) < header_len {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected: header_len,
            found: body.len() as u64,
        });
    }
    let (header_bytes, payload) = body.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::json(origin, e))?;
    if header.dtype != "f32" {
        return Err(Error::Unsupported(format!(
            "{}: dtype {:?}",
            origin.display(),
            header.dtype
        )));
    }
    let numel = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Unsupported(format!("{}: shape overflows", origin.display())))?;
    let expected = numel as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    TensorOf::new(header.shape, data)
}

pub fn write_tensor(t: &TensorOf<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = t.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    let bytes = encode_tensor(t);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorOf<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

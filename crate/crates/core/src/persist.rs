//! Versioned model files: 4-byte magic, u32 format version, u64 payload
//! length, then a JSON payload. All integers little-endian.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UwsError};

pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<T: Serialize>(magic: &[u8; 4], value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value).map_err(|e| UwsError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: DeserializeOwned>(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<T> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(UwsError::Format(format!(
            "{what}: bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(UwsError::Format(format!(
            "{what}: unsupported version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() - 16 != len {
        return Err(UwsError::Format(format!("{what}: truncated payload")));
    }
    serde_json::from_slice(&bytes[16..]).map_err(|e| UwsError::Format(format!("{what}: {e}")))
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, magic: &[u8; 4], value: &T) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(magic, value)?).map_err(|e| UwsError::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| UwsError::io(path, e))?;
    from_bytes(&bytes, magic, &path.display().to_string())
}

//! Parameter checkpoint file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   4 bytes  "HFCK"
//! version u32      currently 1
//! count   u32      number of parameters
//! manifest, per parameter (in store order):
//!   name_len u32, name utf-8 bytes
//!   ndim u32, dims u32 * ndim
//!   offset u64   byte offset of this parameter inside the payload
//! payload: f64 values for each parameter, in manifest order
//! ```

use std::fs;
use std::path::Path;

use hifanet_core::numerics::Tensor;
use hifanet_core::ParamStore;

use crate::dataset::FormatError;
use crate::CliError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in store.iter() {
        manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            manifest.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, FormatError> {
    let corrupt = |msg: &str| FormatError::CorruptFile(format!("checkpoint: {msg}"));
    if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut entries: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let need = |pos: usize, n: usize| -> Result<(), FormatError> {
            if pos + n > bytes.len() {
                Err(corrupt("truncated manifest"))
            } else {
                Ok(())
            }
        };
        need(pos, 4)?;
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, name_len)?;
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| corrupt("parameter name is not utf-8"))?
            .to_string();
        pos += name_len;
        need(pos, 4)?;
        let ndim = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, 4 * ndim + 8)?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let offset = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        entries.push((name, dims, offset));
    }
    let payload = &bytes[pos..];
    let mut store = ParamStore::new();
    for (name, dims, offset) in entries {
        let numel: usize = dims.iter().product();
        let start = offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(corrupt("payload shorter than the manifest claims"));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| corrupt(&e.to_string()))?;
        store.insert(&name, tensor).map_err(|e| corrupt(&e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), CliError> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hifanet_core::attention::{init_params, HiFANetConfig};

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let cfg = HiFANetConfig::tiny(3, 2, 3, 8, 2, 4);
        let store = init_params(&cfg, 42);
        let bytes = encode_checkpoint(&store);
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.len(), store.len());
        for ((na, ta), (nb, tb)) in store.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let cfg = HiFANetConfig::tiny(2, 2, 3, 4, 2, 3);
        let store = init_params(&cfg, 1);
        let bytes = encode_checkpoint(&store);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 5]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(decode_checkpoint(&bad).is_err());
    }
}

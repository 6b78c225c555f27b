//! Checkpoint serialization.
//!
//! Layout: the 4-byte magic `DMPC`, a little-endian u16 format version, then
//! one record per tensor — u16 name length, UTF-8 name, u8 rank, u32 dims,
//! f32 little-endian row-major values — and finally the CRC-64/XZ of every
//! byte after the 6-byte header. Parameters are `f64` in memory and narrow
//! to `f32` on disk.

use std::fs;
use std::path::Path;

use super::net::ParamSet;
use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMPC";
pub const CHECKPOINT_VERSION: u16 = 1;

const HEADER_LEN: usize = 6;
const CRC_LEN: usize = 8;

/// CRC-64/XZ (reflected polynomial 0xC96C5795D7870F42, init and xorout all
/// ones). `crc64("123456789") == 0x995DC9BBDF1939FA`.
fn crc64(data: &[u8]) -> u64 {
    const fn table() -> [u64; 256] {
        let mut t = [0u64; 256];
        let mut i = 0;
        while i < 256 {
            let mut crc = i as u64;
            let mut b = 0;
            while b < 8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xC96C_5795_D787_0F42 } else { crc >> 1 };
                b += 1;
            }
            t[i] = crc;
            i += 1;
        }
        t
    }
    static TABLE: [u64; 256] = table();
    let mut crc = !0u64;
    for &byte in data {
        crc = TABLE[((crc ^ byte as u64) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Writes all parameter tensors to `path`, narrowing values to `f32`.
pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), TensorError> {
    let mut payload = Vec::new();
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(TensorError::Invalid(format!("tensor name too long: {name}")));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(TensorError::Invalid(format!("tensor rank too high: {name}")));
        }
        payload.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            if d > u32::MAX as usize {
                return Err(TensorError::Invalid(format!("dimension too large in {name}")));
            }
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (i, &v) in tensor.values().iter().enumerate() {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(TensorError::NonFinite { index: i });
            }
            payload.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    let mut file = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    file.extend_from_slice(&CHECKPOINT_MAGIC);
    file.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let crc = crc64(&payload);
    file.extend_from_slice(&payload);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

/// CRC-64 fingerprint over the exact `f64` bits of every named tensor, for
/// cheap "parameters unchanged" assertions.
pub fn param_fingerprint(params: &ParamSet) -> u64 {
    let mut payload = Vec::new();
    for (name, tensor) in params.iter() {
        payload.extend_from_slice(&(name.len() as u64).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &d in tensor.dims() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.values() {
            payload.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    crc64(&payload)
}

/// Reads a checkpoint, upcasting stored `f32` values to `f64`.
pub fn load_checkpoint(path: &Path) -> Result<ParamSet, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(TensorError::Corrupt(format!("file too short: {} bytes", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TensorError::Corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Corrupt(format!("unsupported version {version}")));
    }
    let payload = &bytes[HEADER_LEN..bytes.len() - CRC_LEN];
    let stored = u64::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().unwrap());
    let computed = crc64(payload);
    if stored != computed {
        return Err(TensorError::Corrupt(format!(
            "crc mismatch: stored {stored:016x}, computed {computed:016x}"
        )));
    }

    let mut entries = Vec::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], TensorError> {
        if *pos + n > payload.len() {
            return Err(TensorError::Corrupt(format!(
                "record truncated at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &payload[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < payload.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| TensorError::Corrupt(format!("name not utf-8: {e}")))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        let raw = take(&mut pos, 4 * count)?;
        for chunk in raw.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let tensor = Tensor::new(dims, values)
            .map_err(|e| TensorError::Corrupt(format!("tensor {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(ParamSet::from_entries(entries))
}

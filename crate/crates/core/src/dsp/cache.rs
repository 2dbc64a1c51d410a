use std::path::Path;

use super::Spectrogram;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"LMFB";
pub const CACHE_VERSION: u32 = 1;

/// Writes the feature cache format: 16-byte header (magic, version, T, F as
/// little-endian u32) followed by T×F little-endian f32 values.
pub fn write_features(path: &Path, spec: &Spectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * spec.data().len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.dims() as u32).to_le_bytes());
    for v in spec.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Spectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::InvalidInput(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != CACHE_VERSION as usize {
        return Err(bad("unsupported cache version"));
    }
    let (t, f) = (word(8), word(12));
    if bytes.len() != 16 + 4 * t * f {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Spectrogram::new(t, f, data)
}

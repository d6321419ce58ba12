//! Model file: `"BTRM"`, `u8` version, config block, `f32` LE tensors in
//! declaration order, trailing `u64` LE fingerprint.
//!
//! Config block (all little-endian): `u32` n_heads, n_layers, d_model, d_ff,
//! vocab, context_len, then `u16` name length and UTF-8 preset name.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ModelParams};

pub const MODEL_MAGIC: &[u8; 4] = b"BTRM";
pub const MODEL_VERSION: u8 = 1;

/// First 8 bytes (little-endian) of SHA-256 over every weight's LE bytes.
pub fn fingerprint_of(params: &ModelParams) -> u64 {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (_, t) in params.named_tensors() {
        buf.clear();
        buf.extend(t.iter().flat_map(|x| x.to_le_bytes()));
        h.update(&buf);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn write_model(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * params.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    for v in [c.n_heads, c.n_layers, c.d_model, c.d_ff, c.vocab, c.context_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let name = c.preset_name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    for (_, t) in params.named_tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&fingerprint_of(params).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn truncated() -> ModelError {
    ModelError::FingerprintMismatch("file truncated before the stored fingerprint".into())
}

pub fn read_model(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MODEL_MAGIC.as_slice()) {
        return Err(ModelError::BadMagic);
    }
    let version = r.take(1).ok_or_else(truncated)?[0];
    if version != MODEL_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32().ok_or_else(truncated)? as usize;
    }
    let name_len = r.take(2).map(|b| u16::from_le_bytes([b[0], b[1]])).ok_or_else(truncated)? as usize;
    let name = r.take(name_len).ok_or_else(truncated)?;
    let config = ModelConfig {
        n_heads: dims[0],
        n_layers: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        vocab: dims[4],
        context_len: dims[5],
        preset_name: String::from_utf8_lossy(name).into_owned(),
    };
    config.validate()?;
    // refuse absurd sizes before allocating
    let weight_bytes = config.param_count().checked_mul(4).ok_or_else(truncated)?;
    if bytes.len() != r.pos + weight_bytes + 8 {
        if bytes.len() < r.pos + weight_bytes + 8 {
            return Err(truncated());
        }
        return Err(ModelError::FingerprintMismatch(format!(
            "{} trailing bytes after the fingerprint",
            bytes.len() - (r.pos + weight_bytes + 8)
        )));
    }

    let mut params = ModelParams::zeros(&config);
    for t in params.tensors_mut() {
        let raw = r.take(4 * t.len()).ok_or_else(truncated)?;
        for (x, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    let stored = u64::from_le_bytes(r.take(8).ok_or_else(truncated)?.try_into().unwrap());
    let computed = fingerprint_of(&params);
    if stored != computed {
        return Err(ModelError::FingerprintMismatch(format!(
            "stored {stored:016x}, weights hash to {computed:016x}"
        )));
    }
    if let Some((name, _)) = params.named_tensors().into_iter().find(|(_, t)| t.iter().any(|x| !x.is_finite())) {
        return Err(ModelError::NonFinite(name));
    }
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, write_model(params))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams, ModelError> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig::custom(2, 1, 8, None).with_context(16), 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_fingerprint() {
        let p = model();
        let back = read_model(&write_model(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn truncation_is_a_fingerprint_mismatch() {
        let bytes = write_model(&model());
        for cut in [bytes.len() - 1, bytes.len() - 8, bytes.len() / 2, 40] {
            assert!(matches!(read_model(&bytes[..cut]), Err(ModelError::FingerprintMismatch(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_weight_detected() {
        let mut bytes = write_model(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(read_model(&bytes), Err(ModelError::FingerprintMismatch(_))));
    }

    #[test]
    fn one_weight_changes_fingerprint() {
        let p = model();
        let n = p.param_count();
        for idx in [0, 1, n / 3, n - 1] {
            let mut q = p.clone();
            *q.scalar_mut(idx) += 1e-3;
            assert_ne!(q.fingerprint(), p.fingerprint(), "index {idx}");
        }
        // the smallest possible change: one ulp
        let mut q = p.clone();
        let w = q.scalar_mut(5);
        *w = f32::from_bits(w.to_bits() + 1);
        assert_ne!(q.fingerprint(), p.fingerprint());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_model(&model());
        bytes[4] = 9;
        assert!(matches!(read_model(&bytes), Err(ModelError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(read_model(&bytes), Err(ModelError::BadMagic)));
    }
}

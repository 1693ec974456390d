//! Adapter checkpoints.
//!
//! Format (integers little-endian): magic `CVCK`, u32 version = 1, 32-byte
//! architecture digest, u32 parameter count, then per parameter: u16 name
//! length, name bytes, u8 ndim, ndim x u32 dims, little-endian f32 data.
//! Loading verifies the digest and every blob's name and shape against the
//! architecture implied by the supplied config.

use std::path::Path;

use crate::adapter::{AdapterConfig, CvaeAdapter};
use crate::bank::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CVCK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, adapter: &CvaeAdapter) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&adapter.config().digest());
    out.extend_from_slice(&(adapter.params().len() as u32).to_le_bytes());
    for (name, tensor) in adapter.params().iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild an adapter from a checkpoint, validating against `config`.
pub fn load_checkpoint(path: &Path, config: &AdapterConfig) -> Result<CvaeAdapter> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes, config)
}

pub fn load_checkpoint_bytes(bytes: &[u8], config: &AdapterConfig) -> Result<CvaeAdapter> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not an adapter checkpoint"));
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let at = r.offset();
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    if digest != config.digest() {
        return Err(Error::format(
            at,
            "checkpoint architecture digest does not match the supplied config",
        ));
    }
    let at = r.offset();
    let count = r.u32()? as usize;

    let mut adapter = CvaeAdapter::new(config.clone())?;
    if count != adapter.params().len() {
        return Err(Error::format(
            at,
            format!("checkpoint has {count} parameters, config implies {}", adapter.params().len()),
        ));
    }
    let ids: Vec<_> = adapter.params().ids().collect();
    for id in ids {
        let at = r.offset();
        let name = r.string()?;
        if name != adapter.params().name(id) {
            return Err(Error::format(
                at,
                format!("parameter {name:?} out of order, expected {:?}", adapter.params().name(id)),
            ));
        }
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != adapter.params().get(id).shape() {
            return Err(Error::format(
                at,
                format!(
                    "parameter {name:?} has shape {shape:?}, config implies {:?}",
                    adapter.params().get(id).shape()
                ),
            ));
        }
        let at = r.offset();
        let n: usize = shape.iter().product();
        let data = r
            .f32_vec(n)
            .map_err(|_| Error::format(at, format!("truncated data for parameter {name:?}")))?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(at, format!("non-finite values in parameter {name:?}")));
        }
        *adapter.params_mut().get_mut(id) = Tensor::from_f32(shape, &data);
    }
    r.expect_eof()?;
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::EncoderMode;

    fn config() -> AdapterConfig {
        AdapterConfig {
            init_seed: 4,
            ..AdapterConfig::toy_defaults(512, [3, 32, 32], 64)
        }
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cvck");
        let p2 = dir.path().join("b.cvck");
        let adapter = CvaeAdapter::new(config()).unwrap();
        save_checkpoint(&p1, &adapter).unwrap();
        let loaded = load_checkpoint(&p1, &config()).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cvck");
        let adapter = CvaeAdapter::new(config()).unwrap();
        save_checkpoint(&p, &adapter).unwrap();
        let other = AdapterConfig { encoder_mode: EncoderMode::ImgOnly, ..config() };
        let err = load_checkpoint(&p, &other).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");
    }

    #[test]
    fn corruption_cases_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cvck");
        let adapter = CvaeAdapter::new(config()).unwrap();
        save_checkpoint(&p, &adapter).unwrap();
        let good = std::fs::read(&p).unwrap();

        // magic
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(
            load_checkpoint_bytes(&bad, &config()),
            Err(Error::Format { offset: 0, .. })
        ));

        // truncated tail
        let truncated = &good[..good.len() - 100];
        assert!(load_checkpoint_bytes(truncated, &config()).is_err());

        // version
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = load_checkpoint_bytes(&bad, &config()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");

        // NaN payload: first parameter data starts after its header
        let mut bad = good.clone();
        // header: 4 magic + 4 version + 32 digest + 4 count
        let mut off = 44usize;
        let name_len = u16::from_le_bytes(bad[off..off + 2].try_into().unwrap()) as usize;
        off += 2 + name_len;
        let ndim = bad[off] as usize;
        off += 1 + 4 * ndim;
        bad[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = load_checkpoint_bytes(&bad, &config()).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}

//! Versioned binary model checkpoints.
//!
//! Layout (all little-endian):
//!   bytes 0..8    magic `RKNET1\0\0`
//!   bytes 8..12   u32 format version (1)
//!   bytes 12..20  u64 configuration hash (caller-defined)
//!   bytes 20..44  six u32: encoder and decoder channel widths
//!   bytes 44..52  u64 parameter count
//!   bytes 52..    parameter array, f64 each

use super::{FeatureNet, NetConfig};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"RKNET1\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset 0 (expected RKNET1)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} at byte offset 8")]
    BadVersion(u32),
    #[error("checkpoint truncated at byte offset {0}")]
    Truncated(usize),
    #[error("parameter count mismatch at byte offset 44: header says {header}, config implies {expected}")]
    ParamCountMismatch { header: u64, expected: u64 },
    #[error("non-finite parameter at byte offset {0}")]
    NonFinite(usize),
}

pub fn save_checkpoint(path: &Path, net: &FeatureNet, config_hash: u64) -> Result<(), CheckpointError> {
    let cfg = net.config();
    let mut buf = Vec::with_capacity(52 + net.params().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    for c in cfg.encoder_channels.iter().chain(cfg.decoder_channels.iter()) {
        buf.extend_from_slice(&(*c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FeatureNet, u64), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 52 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_hash = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let mut widths = [0usize; 6];
    for (i, wslot) in widths.iter_mut().enumerate() {
        let off = 20 + i * 4;
        *wslot = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let cfg = NetConfig {
        encoder_channels: [widths[0], widths[1], widths[2]],
        decoder_channels: [widths[3], widths[4], widths[5]],
    };
    let declared = u64::from_le_bytes(bytes[44..52].try_into().unwrap());
    let expected = cfg.param_count() as u64;
    if declared != expected {
        return Err(CheckpointError::ParamCountMismatch { header: declared, expected });
    }
    let need = 52 + declared as usize * 8;
    if bytes.len() != need {
        return Err(CheckpointError::Truncated(bytes.len().min(need)));
    }
    let mut params = Vec::with_capacity(declared as usize);
    for i in 0..declared as usize {
        let off = 52 + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(CheckpointError::NonFinite(off));
        }
        params.push(v);
    }
    Ok((FeatureNet::from_params(cfg, params), config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = std::env::temp_dir().join(format!("rks_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let net = FeatureNet::init(NetConfig::default(), 1234);
        let path = dir.join("model.rknet");
        save_checkpoint(&path, &net, 0xfeed_beef).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 0xfeed_beef);
        assert_eq!(loaded.params(), net.params());
        assert_eq!(loaded.config().encoder_channels, net.config().encoder_channels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_with_offsets() {
        let dir = std::env::temp_dir().join(format!("rks_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let net = FeatureNet::init(NetConfig::default(), 5);
        let path = dir.join("model.rknet");
        save_checkpoint(&path, &net, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadVersion(9))));
        std::fs::remove_dir_all(&dir).ok();
    }
}

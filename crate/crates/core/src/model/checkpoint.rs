//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "AXTCKPT1"
//! version   u16      currently 1
//! meta_len  u32      length of the JSON metadata blob
//! meta      bytes    {"config": ModelConfig, "stats": ChannelStats | null}
//! count     u32      number of named tensors
//! per tensor:
//!   name_len u16, name bytes (utf-8)
//!   ndim     u8, dims u32 * ndim
//!   data     f64 * product(dims)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ModelConfig, ModelError, ModelState};
use crate::volume::ChannelStats;

const MAGIC: &[u8; 8] = b"AXTCKPT1";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    config: ModelConfig,
    stats: Option<ChannelStats>,
}

pub fn save_checkpoint(
    w: &mut impl Write,
    state: &ModelState,
    stats: Option<&ChannelStats>,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&Meta {
        config: state.config().clone(),
        stats: stats.copied(),
    })
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(state.num_tensors() as u32).to_le_bytes())?;
    for (name, shape, data) in state.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct Checkpoint {
    pub state: ModelState,
    pub stats: Option<ChannelStats>,
}

pub fn load_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: Meta = serde_json::from_slice(&meta_buf)
        .map_err(|e| CheckpointError::Malformed(format!("bad metadata: {e}")))?;

    let count = read_u32(r)? as usize;
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CheckpointError::Malformed("non-utf8 tensor name".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        parts.push((name, shape, data));
    }
    let state = ModelState::from_parts(meta.config, parts)?;
    Ok(Checkpoint {
        state,
        stats: meta.stats,
    })
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 4,
            ff_dim: 4,
            dropout_p: 0.1,
            input_channels: 3,
            crop_shape: [4, 7, 4],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let state = ModelState::init(&tiny_config(), 77).unwrap();
        let stats = ChannelStats {
            mean: [0.1, -0.2, 0.3],
            std: [1.5, 2.5, 0.5],
        };
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &state, Some(&stats)).unwrap();
        let loaded = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.state.config(), state.config());
        assert_eq!(loaded.stats, Some(stats));
        for ((n1, s1, v1), (n2, s2, v2)) in state.iter().zip(loaded.state.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOTCKPT1rest".to_vec();
        assert!(matches!(
            load_checkpoint(&mut buf.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let state = ModelState::init(&tiny_config(), 78).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &state, None).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(
            load_checkpoint(&mut buf.as_slice()),
            Err(CheckpointError::Io(_))
        ));
    }
}

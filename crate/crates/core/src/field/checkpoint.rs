//! Binary checkpoint format.
//!
//! Layout (little endian):
//! `b"NRFACKPT"`, `u32` version, `u64` header length, header JSON
//! (field config, config hash, free-form metadata), `u64` value count,
//! then the raw `f64` parameter values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldConfig, FieldParameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NRFACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `appearance` or `geometry`.
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub iteration: Option<usize>,
    /// Intrinsics of the training images, if known.
    #[serde(default)]
    pub intrinsics: Option<crate::geometry::CameraIntrinsics>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: FieldConfig,
    config_hash: String,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(params: &FieldParameters, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        config: params.config().clone(),
        config_hash: params.config().hash(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&(params.len() as u64).to_le_bytes())?;
    for v in params.values() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(FieldParameters, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut b4 = [0u8; 4];
    read(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    read(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; hlen];
    read(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.config.hash() != header.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    read(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut bytes = vec![0u8; n * 8];
    read(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = FieldParameters::from_flat(header.config, values)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = FieldConfig {
            grid_resolution: 4,
            grid_channels: 2,
            density_hidden: vec![5],
            density_features: 3,
            color_hidden: vec![4],
            embedding_dim: 2,
            sh_degree: 1,
            n_images: 2,
            bounds: Aabb::new([-1.0, -0.5, 0.0], [1.0, 0.5, 2.0]).unwrap(),
        };
        let mut p = FieldParameters::initialized(cfg, 9).unwrap();
        p.values_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let meta = CheckpointMeta {
            mode: Some("geometry".into()),
            iteration: Some(12),
            intrinsics: None,
        };
        save_checkpoint(&p, &meta, &path).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

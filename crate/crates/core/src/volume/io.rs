//! Raw volume files: `<stem>.raw` holds the voxels in storage order
//! (little-endian `f32`, or `u8` for binary masks) and `<stem>.json` holds
//! `{"dims": [nx, ny, nz], "kind": "..."}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Volume, VolumeKind};
use crate::error::{json_file, Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    kind: VolumeKind,
}

/// The `(raw, sidecar)` file pair for a volume stem.
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut raw = stem.as_os_str().to_owned();
    raw.push(".raw");
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    (raw.into(), json.into())
}

pub fn write_volume(volume: &Volume, stem: &Path) -> Result<()> {
    let (raw, json) = volume_paths(stem);
    if let Some(parent) = raw.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = match volume.kind() {
        VolumeKind::BinaryMask => volume.data().iter().map(|&v| v as u8).collect(),
        _ => volume.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    json_file::write(
        &json,
        &Sidecar {
            dims: volume.dims(),
            kind: volume.kind(),
        },
    )
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (raw, json) = volume_paths(stem);
    let sidecar: Sidecar = json_file::read(&json)?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = sidecar.dims.iter().product();
    let data: Vec<f32> = match sidecar.kind {
        VolumeKind::BinaryMask => {
            if bytes.len() != n {
                return Err(Error::Shape(format!(
                    "{}: expected {n} mask bytes, found {}",
                    raw.display(),
                    bytes.len()
                )));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
        _ => {
            if bytes.len() != 4 * n {
                return Err(Error::Shape(format!(
                    "{}: expected {} bytes of f32, found {}",
                    raw.display(),
                    4 * n,
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
    };
    Volume::new(sidecar.dims, sidecar.kind, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("sub/vol");
        let v = Volume::from_fn([2, 3, 4], VolumeKind::Intensity, |x, y, z| {
            (100 * x + 10 * y + z) as f32
        })
        .unwrap();
        write_volume(&v, &stem).unwrap();
        assert_eq!(read_volume(&stem).unwrap(), v);

        let (raw, json) = volume_paths(&stem);
        let bytes = fs::read(raw).unwrap();
        assert_eq!(bytes.len(), 4 * 24);
        // Second stored value is (0, 0, 1): axis 0 is outermost.
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1.0);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(meta["dims"], serde_json::json!([2, 3, 4]));
        assert_eq!(meta["kind"], "intensity");
    }

    #[test]
    fn masks_are_stored_as_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("mask");
        let v = Volume::new([1, 2, 2], VolumeKind::BinaryMask, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        write_volume(&v, &stem).unwrap();
        let (raw, _) = volume_paths(&stem);
        assert_eq!(fs::read(raw).unwrap(), vec![0u8, 1, 1, 0]);
        assert_eq!(read_volume(&stem).unwrap(), v);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        let v = Volume::zeros([2, 2, 2], VolumeKind::Probability).unwrap();
        write_volume(&v, &stem).unwrap();
        let (raw, _) = volume_paths(&stem);
        fs::write(raw, [0u8; 7]).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::Shape(_))));
    }
}

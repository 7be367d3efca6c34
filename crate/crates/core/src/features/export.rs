//! Feature matrix export: row-major little-endian `f32` blob plus a one-line
//! JSON sidecar `{"rows": T, "cols": D, "layout": ...}`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Layout};
use crate::error::{PvadError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub rows: usize,
    pub cols: usize,
    pub layout: Layout,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_feature_matrix(path: &Path, f: &FeatureSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(f.values.len() * 4);
    for row in f.values.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    let sidecar = FeatureSidecar {
        rows: f.frames(),
        cols: f.dim(),
        layout: f.layout,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string(&sidecar)? + "\n")?;
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<(Array2<f32>, FeatureSidecar)> {
    let sidecar: FeatureSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != sidecar.rows * sidecar.cols * 4 {
        return Err(PvadError::Malformed {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes for a {}x{} f32 matrix",
                bytes.len(),
                sidecar.rows,
                sidecar.cols
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = Array2::from_shape_vec((sidecar.rows, sidecar.cols), data).expect("checked length");
    Ok((m, sidecar))
}

//! Named-tensor archive: `manifest.json` plus a raw little-endian float32
//! payload in `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `tensors` under `dir`, creating it if needed.
pub fn save_tensors<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "float32".into(),
            shape: [m.rows(), m.cols()],
            offset: payload.len() as u64,
        });
        for &v in m.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { format: 1, tensors: entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

/// Reads every tensor in manifest order.
pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Matrix)>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    manifest
        .tensors
        .into_iter()
        .map(|t| {
            if t.dtype != "float32" {
                return Err(Error::Corrupt(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
            }
            let n = t.shape[0] * t.shape[1];
            let start = t.offset as usize;
            let end = start + 4 * n;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| Error::Corrupt(format!("tensor {} runs past the payload", t.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            Ok((t.name, Matrix::new(t.shape[0], t.shape[1], data)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let a = Matrix::from_rows(&[[1.0, 2.5], [-3.25, 0.1]]);
        let b = Matrix::row_vector(vec![7.0]);
        save_tensors(dir.path(), [("a", &a), ("b", &b)]).unwrap();
        let back = load_tensors(dir.path()).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), (2, 2));
        assert_eq!(back[0].1.get(1, 1), f64::from(0.1f32));
        assert_eq!(back[1].1.data(), &[7.0]);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_tensors(dir.path(), [("a", &Matrix::zeros(3, 3))]).unwrap();
        fs::write(dir.path().join(PAYLOAD_FILE), [0u8; 8]).unwrap();
        assert!(matches!(load_tensors(dir.path()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn missing_directory_is_file_not_found() {
        assert!(matches!(load_tensors(Path::new("/nonexistent/ckpt")), Err(Error::FileNotFound(_))));
    }
}

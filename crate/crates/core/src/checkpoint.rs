//! `UCP1` checkpoint container.
//!
//! Layout: the magic bytes `UCP1`, a little-endian u64 byte length, a
//! JSON manifest listing named arrays with shapes plus free-form
//! metadata, then the raw little-endian f64 payloads in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"UCP1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(&str, &Tensor)],
) -> Result<()> {
    let manifest = Manifest {
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in arrays {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let fail = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fail("bad magic, expected UCP1".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let mut manifest_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| fail(format!("manifest: {e}")))?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    let mut buf = [0u8; 8];
    for entry in manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push((
            entry.name,
            Tensor::new(entry.shape, data).map_err(|e| fail(e.to_string()))?,
        ));
    }
    Ok((manifest.meta, arrays))
}

/// Save a parameter set with metadata.
pub fn save_params(path: &Path, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let arrays: Vec<(&str, &Tensor)> = params.entries().collect();
    write_checkpoint(path, meta, &arrays)
}

/// Load a parameter set; array order in the file becomes parameter order.
pub fn load_params(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
    let (meta, arrays) = read_checkpoint(path)?;
    let mut params = ParamSet::new();
    for (name, tensor) in arrays {
        params.add(&name, tensor);
    }
    Ok((meta, params))
}

/// Content hash of raw bytes, in the style of a git blob:
/// `sha256("blob <len>\0" + bytes)`, hex-encoded.
pub fn content_hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn content_hash_file(path: &Path) -> Result<String> {
    Ok(content_hash_bytes(&std::fs::read(path)?))
}

/// Hash of a parameter set's names, shapes and values. Used to assert
/// that frozen models are untouched by attacks.
pub fn params_content_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.entries() {
        h.update(name.as_bytes());
        h.update(b"\0");
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_arrays_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ucp1");
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::vector(vec![-0.5, 0.25]);
        write_checkpoint(&path, &json!({"kind": "test", "n": 7}), &[("a", &a), ("b", &b)]).unwrap();
        let (meta, arrays) = read_checkpoint(&path).unwrap();
        assert_eq!(meta["kind"], "test");
        assert_eq!(arrays[0].0, "a");
        assert_eq!(arrays[0].1.data(), a.data());
        assert_eq!(arrays[1].1.shape(), &[2]);
    }

    #[test]
    fn magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ucp1");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn params_hash_reflects_value_changes() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::vector(vec![1.0, 2.0]));
        let h1 = params_content_hash(&p);
        assert_eq!(h1, params_content_hash(&p));
        for (_, t) in p.entries_mut() {
            t.data_mut()[0] = 9.0;
        }
        assert_ne!(h1, params_content_hash(&p));
    }
}

//! Versioned checkpoint container shared by every trained component.
//!
//! Layout: 8-byte magic `SRCKPT\0\0`, little-endian `u64` header length, a
//! JSON header, then the tensors as consecutive little-endian `f32` blobs in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// What the checkpoint holds, e.g. `classifier` or `sr-model`.
    pub kind: String,
    /// Component configuration and any scalars needed to rebuild it.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore<f32>,
}

pub fn encode(kind: &str, meta: &serde_json::Value, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        kind: kind.to_string(),
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + h.len() + 4 * params.numel(false));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    let mut params = ParamStore::new();
    let mut pos = 16 + hlen;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.add(t.name.clone(), Tensor::from_vec(&t.shape, data));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    params.freeze_all();
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        params,
    })
}

pub fn save(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(kind, meta, params)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a checkpoint of the expected kind; a missing file is a dependency error.
pub fn load(path: &Path, kind: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|_| Error::Dependency {
        what: format!("{kind} checkpoint"),
        path: path.to_path_buf(),
    })?;
    let c = decode(&bytes)?;
    if c.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", c.kind)));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_layout() {
        let mut ps = ParamStore::new();
        ps.add("a.w", Tensor::from_vec(&[2, 2], vec![1.0f32, -2.0, 0.5, 3.25]));
        ps.add("b", Tensor::from_vec(&[1], vec![7.0f32]));
        let meta = serde_json::json!({"scale": 0.5});
        let bytes = encode("test", &meta, &ps).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(bytes.len(), 16 + hlen + 5 * 4);
        assert_eq!(&bytes[16 + hlen..16 + hlen + 4], &1.0f32.to_le_bytes());
        let c = decode(&bytes).unwrap();
        assert_eq!(c.meta, meta);
        assert_eq!(c.params.len(), 2);
        assert_eq!(c.params.numel(true), 0);
    }

    #[test]
    fn rejects_corruption() {
        let ps = ParamStore::<f32>::new();
        let mut bytes = encode("x", &serde_json::Value::Null, &ps).unwrap();
        assert!(decode(&bytes[..10]).is_err());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        let mut v2 = encode("x", &serde_json::Value::Null, &ps).unwrap();
        let hlen = u64::from_le_bytes(v2[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(v2[16..16 + hlen].to_vec()).unwrap().replace("\"version\":1", "\"version\":9");
        v2.truncate(16);
        v2.extend_from_slice(text.as_bytes());
        assert!(matches!(decode(&v2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_dependency_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load(&tmp.path().join("none.ckpt"), "x"),
            Err(Error::Dependency { .. })
        ));
    }
}

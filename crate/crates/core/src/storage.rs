//! Tensor container and checkpoint formats.
//!
//! A tensor container is a single file: one JSON header line
//! `{"dtype":"f64","shape":[...],"layout":"row-major","endianness":"little"}`
//! followed by the raw little-endian element bytes. A checkpoint is a
//! directory holding `manifest.json` plus one container per named tensor;
//! the manifest records a role tag, shape and SHA-256 per tensor, a config
//! snapshot, and an overall content hash that is verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
pub const TENSOR_EXT: &str = "vt";
pub const FORMAT_VERSION: u32 = 1;

/// Role tags for checkpoint tensors.
pub mod role {
    pub const BASE: &str = "base";
    pub const IDENTITY_ADAPTER: &str = "identity_adapter";
    pub const MOTION_ADAPTER: &str = "motion_adapter";
    pub const TEXTUAL_IDENTITY: &str = "textual_identity";
    pub const LORA: &str = "lora";
    pub const GUIDANCE_IMAGE: &str = "guidance_image";
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Write a file atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    endianness: String,
}

/// Serialize data + shape into container bytes.
pub fn tensor_container_bytes(data: &[f64], shape: &[usize]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::invalid(format!(
            "container payload {} does not match shape {:?}",
            data.len(),
            shape
        )));
    }
    let header = ContainerHeader {
        dtype: "f64".to_string(),
        shape: shape.to_vec(),
        layout: "row-major".to_string(),
        endianness: "little".to_string(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse container bytes back into data + shape (bitwise exact).
pub fn tensor_container_parse(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity("tensor container missing header line".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != "f64" {
        return Err(Error::Integrity(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.layout != "row-major" || header.endianness != "little" {
        return Err(Error::Integrity("unsupported container layout".into()));
    }
    let expected: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != expected * 8 {
        return Err(Error::Integrity(format!(
            "payload length {} does not match shape {:?}",
            payload.len(),
            header.shape
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    Ok((data, header.shape))
}

pub fn save_tensor(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    write_atomic(path, &tensor_container_bytes(data, shape)?)
}

pub fn load_tensor(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    tensor_container_parse(&bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

/// Everything in a checkpoint except the content hash (hashed as canonical
/// JSON of this struct).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCore {
    pub format_version: u32,
    pub created_by: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub core: ManifestCore,
    pub content_hash: String,
}

impl Manifest {
    pub fn tensor_entry(&self, name: &str) -> Option<&TensorEntry> {
        self.core.tensors.iter().find(|t| t.name == name)
    }
}

fn manifest_hash(core: &ManifestCore) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(core)?))
}

fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// A tensor headed into a checkpoint.
pub struct CheckpointTensor {
    pub name: String,
    pub role: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckpointTensor {
    pub fn from_tensor(name: &str, role: &str, t: &Tensor) -> CheckpointTensor {
        CheckpointTensor {
            name: name.to_string(),
            role: role.to_string(),
            data: t.to_vec(),
            shape: t.shape().to_vec(),
        }
    }
}

/// Loaded checkpoint: verified manifest plus tensor payloads by name.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<f64>, Vec<usize>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&(Vec<f64>, Vec<usize>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing tensor {name:?}")))
    }

    pub fn names_with_role(&self, role: &str) -> Vec<&str> {
        self.manifest
            .core
            .tensors
            .iter()
            .filter(|t| t.role == role)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn content_hash(&self) -> &str {
        &self.manifest.content_hash
    }
}

/// Write a checkpoint directory. Every tensor name must be unique.
pub fn save_checkpoint(
    dir: &Path,
    tensors: &[CheckpointTensor],
    config: serde_json::Value,
    extra: BTreeMap<String, serde_json::Value>,
    seed: u64,
) -> Result<Manifest> {
    let mut names = std::collections::BTreeSet::new();
    for t in tensors {
        if !names.insert(&t.name) {
            return Err(Error::invalid(format!("duplicate tensor name {:?}", t.name)));
        }
    }
    fs::create_dir_all(dir.join(TENSOR_DIR))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = format!("{}/{}.{}", TENSOR_DIR, sanitize_name(&t.name), TENSOR_EXT);
        let bytes = tensor_container_bytes(&t.data, &t.shape)?;
        let sha = sha256_hex(&bytes);
        write_atomic(&dir.join(&file), &bytes)?;
        entries.push(TensorEntry {
            name: t.name.clone(),
            role: t.role.clone(),
            file,
            shape: t.shape.clone(),
            dtype: "f64".to_string(),
            sha256: sha,
        });
    }
    let core = ManifestCore {
        format_version: FORMAT_VERSION,
        created_by: format!("vidadapt {}", env!("CARGO_PKG_VERSION")),
        seed,
        config,
        extra,
        tensors: entries,
    };
    let content_hash = manifest_hash(&core)?;
    let manifest = Manifest { core, content_hash };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load and fully verify a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&manifest_path)
        .map_err(|e| Error::Integrity(format!("cannot open {}: {e}", manifest_path.display())))?
        .read_to_end(&mut bytes)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let recomputed = manifest_hash(&manifest.core)?;
    if recomputed != manifest.content_hash {
        return Err(Error::Integrity(format!(
            "manifest content hash mismatch: recorded {}, recomputed {}",
            manifest.content_hash, recomputed
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.core.tensors {
        let path = dir.join(&entry.file);
        let mut raw = Vec::new();
        fs::File::open(&path)
            .map_err(|e| Error::Integrity(format!("missing tensor file {}: {e}", path.display())))?
            .read_to_end(&mut raw)?;
        let sha = sha256_hex(&raw);
        if sha != entry.sha256 {
            return Err(Error::Integrity(format!(
                "tensor {:?} hash mismatch: recorded {}, recomputed {sha}",
                entry.name, entry.sha256
            )));
        }
        let (data, shape) = tensor_container_parse(&raw)?;
        if shape != entry.shape {
            return Err(Error::Integrity(format!(
                "tensor {:?} shape mismatch: manifest {:?}, container {shape:?}",
                entry.name, entry.shape
            )));
        }
        tensors.insert(entry.name.clone(), (data, shape));
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Copy loaded tensor data into live parameters, by exact name match.
pub fn load_into_params(
    params: &[(String, Tensor)],
    tensors: &BTreeMap<String, (Vec<f64>, Vec<usize>)>,
) -> Result<()> {
    for (name, param) in params {
        let (data, shape) = tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing tensor {name:?}")))?;
        if shape != param.shape() {
            return Err(Error::ShapeMismatch {
                context: "load_checkpoint (target parameter)",
                expected: param.shape().to_vec(),
                got: shape.clone(),
            });
        }
        param.with_data_mut(|d| d.copy_from_slice(data));
    }
    Ok(())
}

/// SHA-256 of each named parameter's container bytes.
pub fn hash_params(params: &[(String, Tensor)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, p) in params {
        let bytes = tensor_container_bytes(&p.to_vec(), p.shape())?;
        out.insert(name.clone(), sha256_hex(&bytes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn container_round_trip_is_bitwise() {
        let data = rng::normal_vec(&mut rng::seeded(1), 24);
        let bytes = tensor_container_bytes(&data, &[2, 3, 4]).unwrap();
        let (back, shape) = tensor_container_parse(&bytes).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn container_rejects_bad_payload() {
        let data = vec![1.0; 4];
        assert!(tensor_container_bytes(&data, &[5]).is_err());
        let mut bytes = tensor_container_bytes(&data, &[4]).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(tensor_container_parse(&bytes).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let data = rng::normal_vec(&mut rng::seeded(2), 12);
        let tensors = vec![
            CheckpointTensor {
                name: "a.w".into(),
                role: role::BASE.into(),
                data: data.clone(),
                shape: vec![3, 4],
            },
            CheckpointTensor {
                name: "b/w".into(),
                role: role::IDENTITY_ADAPTER.into(),
                data: vec![0.5; 4],
                shape: vec![4],
            },
        ];
        save_checkpoint(&path, &tensors, serde_json::json!({"k": 1}), BTreeMap::new(), 7).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        let (a, shape) = loaded.tensor("a.w").unwrap();
        assert_eq!(shape, &vec![3, 4]);
        for (x, y) in a.iter().zip(&data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded.names_with_role(role::IDENTITY_ADAPTER), vec!["b/w"]);

        // Tamper with the manifest.
        let mpath = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, text.replace("\"seed\": 7", "\"seed\": 8")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn tampered_tensor_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let tensors = vec![CheckpointTensor {
            name: "w".into(),
            role: role::BASE.into(),
            data: vec![1.0, 2.0],
            shape: vec![2],
        }];
        save_checkpoint(&path, &tensors, serde_json::Value::Null, BTreeMap::new(), 0).unwrap();
        let tpath = path.join(TENSOR_DIR).join("w.vt");
        let mut raw = std::fs::read(&tpath).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 0xff;
        std::fs::write(&tpath, raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn load_into_params_checks_shapes() {
        let p = Tensor::param(vec![0.0; 6], &[2, 3]);
        let mut tensors = BTreeMap::new();
        tensors.insert("p".to_string(), (vec![1.0; 6], vec![2, 3]));
        load_into_params(&[("p".to_string(), p.clone())], &tensors).unwrap();
        assert_eq!(p.to_vec(), vec![1.0; 6]);
        tensors.insert("p".to_string(), (vec![1.0; 6], vec![3, 2]));
        assert!(load_into_params(&[("p".to_string(), p)], &tensors).is_err());
    }

    #[test]
    fn missing_tensor_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let tensors = vec![CheckpointTensor {
            name: "w".into(),
            role: role::BASE.into(),
            data: vec![1.0],
            shape: vec![1],
        }];
        save_checkpoint(&path, &tensors, serde_json::Value::Null, BTreeMap::new(), 0).unwrap();
        std::fs::remove_file(path.join(TENSOR_DIR).join("w.vt")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }
}

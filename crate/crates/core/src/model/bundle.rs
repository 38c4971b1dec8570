//! Directory-based tensor container.
//!
//! ```text
//! bundle/
//!   manifest.json
//!   tensors/t00000.bin   raw little-endian f32, row-major, no padding
//! ```
//!
//! The manifest carries a format version, one record per tensor and a free-form
//! metadata map. Records may carry their own metadata (`meta`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: BTreeMap<String, Value>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::SizeMismatch {
                name,
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        Ok(Self {
            name,
            shape,
            data,
            meta: BTreeMap::new(),
        })
    }

    /// Stores a matrix as a 2-D f32 tensor.
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reads a 2-D tensor (or a 1-D one as a single row) back as f64.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            other => {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {other:?}, expected a matrix",
                    self.name
                )))
            }
        };
        Matrix::new(rows, cols, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    tensors: Vec<Tensor>,
    pub metadata: BTreeMap<String, Value>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Manifest(format!("duplicate tensor name '{}'", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Manifest(format!("bundle has no tensor '{name}'")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.require(name)?.to_matrix()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            tensors: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| TensorRecord {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    file: format!("{TENSOR_DIR}/t{i:05}.bin"),
                    offset: 0,
                    meta: t.meta.clone(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Writes the bundle into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tensor_dir = dir.join(TENSOR_DIR);
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        let manifest = self.manifest();
        for (t, rec) in self.tensors.iter().zip(&manifest.tensors) {
            let path = dir.join(&rec.file);
            fs::write(&path, encode_f32(&t.data)).map_err(|e| Error::io(&path, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        match raw.get("format_version").and_then(Value::as_u64) {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(Error::UnsupportedVersion(v)),
            None => return Err(Error::Manifest("missing format_version".into())),
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::Manifest(e.to_string()))?;

        let mut files: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        let mut extent: BTreeMap<&str, usize> = BTreeMap::new();
        let mut names = HashSet::new();
        let mut bundle = TensorBundle {
            tensors: Vec::with_capacity(manifest.tensors.len()),
            metadata: manifest.metadata.clone(),
        };
        for rec in &manifest.tensors {
            if !names.insert(rec.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate tensor name '{}'", rec.name)));
            }
            if rec.dtype != "f32" {
                return Err(Error::Manifest(format!(
                    "tensor '{}' has dtype '{}', only f32 is supported",
                    rec.name, rec.dtype
                )));
            }
            check_relative(&rec.file)?;
            if !files.contains_key(rec.file.as_str()) {
                let p = dir.join(&rec.file);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                files.insert(rec.file.as_str(), bytes);
            }
            let bytes = &files[rec.file.as_str()];
            let numel: usize = rec.shape.iter().product();
            let start = usize::try_from(rec.offset)
                .map_err(|_| Error::Manifest(format!("offset of '{}' overflows", rec.name)))?;
            let end = start + numel * 4;
            if end > bytes.len() {
                return Err(Error::SizeMismatch {
                    name: rec.name.clone(),
                    expected: end,
                    found: bytes.len(),
                });
            }
            let e = extent.entry(rec.file.as_str()).or_insert(0);
            *e = (*e).max(end);
            let mut t = Tensor::new(rec.name.clone(), rec.shape.clone(), decode_f32(&bytes[start..end]))?;
            t.meta = rec.meta.clone();
            bundle.tensors.push(t);
        }
        for (file, end) in extent {
            let found = files[file].len();
            if found != end {
                return Err(Error::SizeMismatch {
                    name: file.to_string(),
                    expected: end,
                    found,
                });
            }
        }
        Ok(bundle)
    }
}

fn check_relative(file: &str) -> Result<()> {
    let ok = Path::new(file)
        .components()
        .all(|c| matches!(c, Component::Normal(_)));
    if ok && !file.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(format!("tensor file '{file}' must be a relative path inside the bundle")))
    }
}

pub fn encode_f32(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

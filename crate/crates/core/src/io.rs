//! Neutral on-disk model format: a JSON manifest plus one raw blob.
//!
//! A model directory holds `manifest.json` (config, dtype, tensor table,
//! CRC32 of the blob) and `weights.bin` (little-endian IEEE-754 values,
//! each tensor starting at an 8-byte-aligned offset). The format is meant
//! to be trivially parseable from any language; nothing in it is specific
//! to this crate.
//!
//! `f64` is the working precision and round-trips bit-exactly. `f32` is
//! accepted as a storage precision and promoted to `f64` on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    KeptProjection, LayerWeights, Model, ModelConfig, SlimLayer, SlimMode, SlimModel,
    TransformedWeights, ValueMap,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

impl Dtype {
    fn byte_size(self) -> u64 {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `[rows, cols]` for matrices, `[len]` for bias vectors.
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub endianness: String,
    /// True when the value/key projection has been replaced by `Wkv`/`Wvk`.
    pub slim: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slim_mode: Option<SlimMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Parameter growth of the value map versus the matrix it replaced
    /// (`e/d` for the rectangular transform; absent when there is none).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wkv_size_ratio: Option<f64>,
    pub config: ModelConfig,
    pub blob_crc32: u32,
    pub tensors: Vec<TensorEntry>,
}

/// What `save_*` reports back after writing a directory.
#[derive(Debug, Clone)]
pub struct ManifestSummary {
    pub path: PathBuf,
    pub tensor_count: usize,
    pub blob_bytes: u64,
    pub crc32: u32,
}

// ---------------------------------------------------------------------------
// writing

struct BlobWriter {
    dtype: Dtype,
    blob: Vec<u8>,
    tensors: Vec<TensorEntry>,
}

impl BlobWriter {
    fn new(dtype: Dtype) -> Self {
        Self {
            dtype,
            blob: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push_values(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        while !self.blob.len().is_multiple_of(8) {
            self.blob.push(0);
        }
        let offset = self.blob.len() as u64;
        match self.dtype {
            Dtype::F64 => {
                for v in values {
                    self.blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in values {
                    self.blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        self.tensors.push(TensorEntry {
            name,
            shape,
            offset,
            byte_length: values.len() as u64 * self.dtype.byte_size(),
        });
    }

    fn push_matrix(&mut self, name: String, m: &Matrix) {
        self.push_values(name, vec![m.rows(), m.cols()], m.data());
    }

    fn push_bias(&mut self, name: String, b: &Option<Vec<f64>>) {
        if let Some(b) = b {
            self.push_values(name, vec![b.len()], b);
        }
    }
}

fn write_dir(
    path: &Path,
    config: &ModelConfig,
    seed: Option<u64>,
    slim_mode: Option<SlimMode>,
    writer: BlobWriter,
) -> Result<ManifestSummary> {
    let wkv_size_ratio = match slim_mode {
        Some(SlimMode::RectKv) => Some(config.e as f64 / config.d as f64),
        _ => None,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: match writer.dtype {
            Dtype::F64 => "f64".to_string(),
            Dtype::F32 => "f32".to_string(),
        },
        endianness: "little".to_string(),
        slim: slim_mode.is_some(),
        slim_mode,
        seed,
        wkv_size_ratio,
        config: config.clone(),
        blob_crc32: crc32fast::hash(&writer.blob),
        tensors: writer.tensors,
    };
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let blob_path = path.join(BLOB_FILE);
    fs::write(&blob_path, &writer.blob).map_err(|source| Error::Io {
        path: blob_path.clone(),
        source,
    })?;
    let manifest_path = path.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|source| Error::Io {
        path: manifest_path,
        source,
    })?;
    Ok(ManifestSummary {
        path: path.to_path_buf(),
        tensor_count: manifest.tensors.len(),
        blob_bytes: writer.blob.len() as u64,
        crc32: manifest.blob_crc32,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<ManifestSummary> {
    save_model_with_dtype(model, path, Dtype::F64)
}

pub fn save_model_with_dtype(model: &Model, path: &Path, dtype: Dtype) -> Result<ManifestSummary> {
    if model.layers.is_empty() {
        return Err(Error::EmptyModel);
    }
    for layer in &model.layers {
        layer.validate(&model.config)?;
    }
    let mut writer = BlobWriter::new(dtype);
    for (i, layer) in model.layers.iter().enumerate() {
        writer.push_matrix(format!("layer{i}.Wq"), &layer.w_q);
        writer.push_matrix(format!("layer{i}.Wk"), &layer.w_k);
        writer.push_matrix(format!("layer{i}.Wv"), &layer.w_v);
        writer.push_matrix(format!("layer{i}.Wo"), &layer.w_o);
        writer.push_bias(format!("layer{i}.bq"), &layer.b_q);
        writer.push_bias(format!("layer{i}.bk"), &layer.b_k);
        writer.push_bias(format!("layer{i}.bv"), &layer.b_v);
        writer.push_bias(format!("layer{i}.bo"), &layer.b_o);
    }
    write_dir(path, &model.config, model.seed, None, writer)
}

pub fn save_slim_model(model: &SlimModel, path: &Path) -> Result<ManifestSummary> {
    if model.layers.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut writer = BlobWriter::new(Dtype::F64);
    for (i, layer) in model.layers.iter().enumerate() {
        writer.push_matrix(format!("layer{i}.Wq"), &layer.w_q);
        match &layer.kept {
            KeptProjection::Key(w_k) => writer.push_matrix(format!("layer{i}.Wk"), w_k),
            KeptProjection::Value(w_v) => writer.push_matrix(format!("layer{i}.Wv"), w_v),
        }
        match &layer.transformed.map {
            ValueMap::Kv(m) => writer.push_matrix(format!("layer{i}.Wkv"), m),
            ValueMap::Vk(m) => writer.push_matrix(format!("layer{i}.Wvk"), m),
        }
        writer.push_matrix(format!("layer{i}.Wo"), &layer.w_o);
        writer.push_bias(format!("layer{i}.bq"), &layer.transformed.query_bias);
        writer.push_bias(format!("layer{i}.bk"), &layer.b_k);
        writer.push_bias(format!("layer{i}.bv"), &layer.b_v);
        let b_o = layer
            .transformed
            .folded_output_bias
            .clone()
            .or_else(|| layer.b_o.clone());
        writer.push_bias(format!("layer{i}.bo"), &b_o);
    }
    write_dir(path, &model.config, model.seed, Some(model.mode), writer)
}

// ---------------------------------------------------------------------------
// reading

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|source| Error::Io {
        path: manifest_path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: manifest_path,
        source,
    })
}

struct BlobReader {
    dtype: Dtype,
    blob: Vec<u8>,
}

impl BlobReader {
    fn values(&self, entry: &TensorEntry) -> Result<Vec<f64>> {
        let elems: usize = entry.shape.iter().product();
        let needed = elems as u64 * self.dtype.byte_size();
        if entry.byte_length < needed {
            return Err(Error::TruncatedBlob {
                tensor: entry.name.clone(),
                needed,
                available: entry.byte_length,
            });
        }
        let end = entry.offset.checked_add(needed);
        match end {
            Some(end) if end <= self.blob.len() as u64 => {}
            _ => {
                return Err(Error::TruncatedBlob {
                    tensor: entry.name.clone(),
                    needed,
                    available: (self.blob.len() as u64).saturating_sub(entry.offset),
                })
            }
        }
        let bytes = &self.blob[entry.offset as usize..(entry.offset + needed) as usize];
        let values = match self.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Ok(values)
    }

    fn matrix(&self, entry: &TensorEntry, expected: (usize, usize)) -> Result<Matrix> {
        if entry.shape.len() != 2 || (entry.shape[0], entry.shape[1]) != expected {
            let found = match entry.shape.as_slice() {
                [r, c] => (*r, *c),
                [l] => (1, *l),
                _ => (0, 0),
            };
            return Err(Error::TensorShape {
                tensor: entry.name.clone(),
                expected,
                found,
            });
        }
        Matrix::from_vec(expected.0, expected.1, self.values(entry)?)
    }

    fn bias(&self, entry: &TensorEntry, expected: usize) -> Result<Vec<f64>> {
        if entry.shape != [expected] {
            let found = match entry.shape.as_slice() {
                [l] => (1, *l),
                [r, c] => (*r, *c),
                _ => (0, 0),
            };
            return Err(Error::TensorShape {
                tensor: entry.name.clone(),
                expected: (1, expected),
                found,
            });
        }
        self.values(entry)
    }
}

struct LoadedDir {
    manifest: Manifest,
    reader: BlobReader,
}

impl LoadedDir {
    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn optional_entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|t| t.name == name)
    }

    fn matrix(&self, name: &str, expected: (usize, usize)) -> Result<Matrix> {
        self.reader.matrix(self.entry(name)?, expected)
    }

    fn optional_bias(&self, name: &str, expected: usize) -> Result<Option<Vec<f64>>> {
        match self.optional_entry(name) {
            Some(entry) => Ok(Some(self.reader.bias(entry, expected)?)),
            None => Ok(None),
        }
    }
}

fn open_dir(path: &Path) -> Result<LoadedDir> {
    let manifest = read_manifest(path)?;
    if manifest.endianness != "little" {
        return Err(Error::UnknownEndianness(manifest.endianness));
    }
    let dtype = match manifest.dtype.as_str() {
        "f64" => Dtype::F64,
        "f32" => Dtype::F32,
        other => return Err(Error::UnknownDtype(other.to_string())),
    };
    manifest.config.validate()?;
    let blob_path = path.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|source| Error::Io {
        path: blob_path.clone(),
        source,
    })?;
    let found = crc32fast::hash(&blob);
    if found != manifest.blob_crc32 {
        return Err(Error::ChecksumMismatch {
            path: blob_path,
            expected: manifest.blob_crc32,
            found,
        });
    }
    Ok(LoadedDir {
        manifest,
        reader: BlobReader { dtype, blob },
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let dir = open_dir(path)?;
    if dir.manifest.slim {
        return Err(Error::WrongModelKind {
            path: path.to_path_buf(),
            expected: "vanilla",
        });
    }
    let config = dir.manifest.config.clone();
    let proj = (config.d, config.e);
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        layers.push(LayerWeights {
            w_q: dir.matrix(&format!("layer{i}.Wq"), proj)?,
            w_k: dir.matrix(&format!("layer{i}.Wk"), proj)?,
            w_v: dir.matrix(&format!("layer{i}.Wv"), proj)?,
            w_o: dir.matrix(&format!("layer{i}.Wo"), (config.e, config.d))?,
            b_q: dir.optional_bias(&format!("layer{i}.bq"), config.e)?,
            b_k: dir.optional_bias(&format!("layer{i}.bk"), config.e)?,
            b_v: dir.optional_bias(&format!("layer{i}.bv"), config.e)?,
            b_o: dir.optional_bias(&format!("layer{i}.bo"), config.d)?,
        });
    }
    Ok(Model {
        config,
        layers,
        seed: dir.manifest.seed,
    })
}

pub fn load_slim_model(path: &Path) -> Result<SlimModel> {
    let dir = open_dir(path)?;
    let Some(mode) = dir.manifest.slim_mode else {
        return Err(Error::WrongModelKind {
            path: path.to_path_buf(),
            expected: "slim",
        });
    };
    let config = dir.manifest.config.clone();
    let proj = (config.d, config.e);
    let map_shape = match mode {
        SlimMode::Kv => proj,
        SlimMode::RectKv => (config.e, config.e),
        SlimMode::Vk => proj,
    };
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let (kept, map) = match mode {
            SlimMode::Kv | SlimMode::RectKv => (
                KeptProjection::Key(dir.matrix(&format!("layer{i}.Wk"), proj)?),
                ValueMap::Kv(dir.matrix(&format!("layer{i}.Wkv"), map_shape)?),
            ),
            SlimMode::Vk => (
                KeptProjection::Value(dir.matrix(&format!("layer{i}.Wv"), proj)?),
                ValueMap::Vk(dir.matrix(&format!("layer{i}.Wvk"), map_shape)?),
            ),
        };
        let b_o = dir.optional_bias(&format!("layer{i}.bo"), config.d)?;
        let b_k = dir.optional_bias(&format!("layer{i}.bk"), config.e)?;
        let b_v = dir.optional_bias(&format!("layer{i}.bv"), config.e)?;
        // a folded file carries no raw key/value biases, so a present `bo`
        // is the folded c* exactly when bk and bv are gone
        let folded = b_k.is_none() && b_v.is_none() && b_o.is_some();
        layers.push(SlimLayer {
            w_q: dir.matrix(&format!("layer{i}.Wq"), proj)?,
            w_o: dir.matrix(&format!("layer{i}.Wo"), (config.e, config.d))?,
            kept,
            transformed: TransformedWeights {
                map,
                folded_output_bias: if folded { b_o.clone() } else { None },
                query_bias: dir.optional_bias(&format!("layer{i}.bq"), config.e)?,
            },
            b_k,
            b_v,
            b_o: if folded { None } else { b_o },
        });
    }
    Ok(SlimModel {
        config,
        mode,
        layers,
        seed: dir.manifest.seed,
    })
}

//! On-disk capture format.
//!
//! A capture is a directory holding `manifest.json` and one `<name>.bin`
//! file per tensor. Each binary file is raw little-endian IEEE-754 `f32`
//! data in row-major order with no header. The manifest lists every tensor
//! (name, shape, dtype `"f32"`, relative file name) together with a
//! metadata block and, for weight directories, the model configuration.
//!
//! Tensor names are dot-separated segments of `[a-z0-9_]`, for example
//! `layer0.head3.attn_weights`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "waiverlab-capture";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32";

/// Canonical tensor names shared by every producer.
pub mod names {
    pub const EMB_TOKEN: &str = "emb.token";
    pub const EMB_TYPE: &str = "emb.type";
    pub const EMB_INPUT: &str = "emb.input";
    pub const PE_TABLE: &str = "pe.table";

    pub fn attn_weights(layer: usize, head: usize) -> String {
        format!("layer{layer}.head{head}.attn_weights")
    }

    pub fn value(layer: usize, head: usize) -> String {
        format!("layer{layer}.head{head}.v")
    }

    pub fn query(layer: usize, head: usize) -> String {
        format!("layer{layer}.head{head}.q")
    }

    pub fn key(layer: usize, head: usize) -> String {
        format!("layer{layer}.head{head}.k")
    }

    pub fn hidden(layer: usize) -> String {
        format!("layer{layer}.hidden")
    }

    pub fn ffn_out(layer: usize) -> String {
        format!("layer{layer}.ffn_out")
    }

    pub fn attn_out(layer: usize) -> String {
        format!("layer{layer}.attn_out")
    }

    /// Parses `layer{i}.head{h}.<leaf>` into `(i, h)` when the leaf matches.
    pub fn parse_head_tensor(name: &str, leaf: &str) -> Option<(usize, usize)> {
        let mut parts = name.split('.');
        let layer = parts.next()?.strip_prefix("layer")?.parse().ok()?;
        let head = parts.next()?.strip_prefix("head")?.parse().ok()?;
        (parts.next()? == leaf && parts.next().is_none()).then_some((layer, head))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Toy,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRegime {
    Causal,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Query row restricted to attend only to itself, in every layer.
    MaskRow { position: usize },
    /// Positional table row `target` overwritten with row `source`.
    PeSwap { target: usize, source: usize },
    /// First token replaced by an explicit id (written by the exporter).
    FirstTokenOverride { id: usize },
}

impl Intervention {
    /// Sequence position the intervention singles out, if any.
    pub fn position(&self) -> Option<usize> {
        match *self {
            Intervention::MaskRow { position } => Some(position),
            Intervention::PeSwap { target, .. } => Some(target),
            Intervention::FirstTokenOverride { .. } => Some(0),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Intervention::MaskRow { position } => format!("mask_row {position}"),
            Intervention::PeSwap { target, source } => format!("pe_swap {target}<-{source}"),
            Intervention::FirstTokenOverride { id } => format!("first_token {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeInfo {
    pub base: f32,
    pub pairing: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureMetadata {
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<AttentionRegime>,
    #[serde(default)]
    pub interventions: Vec<Intervention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope: Option<RopeInfo>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_config: Option<ModelConfig>,
    metadata: CaptureMetadata,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Capture {
    pub metadata: CaptureMetadata,
    pub model_config: Option<ModelConfig>,
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

impl Capture {
    pub fn new(metadata: CaptureMetadata) -> Self {
        Self {
            metadata,
            model_config: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !is_valid_name(&name) {
            return Err(Error::Manifest(format!("invalid tensor name {name:?}")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Manifest(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::IncompleteCapture(vec![name.to_string()]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(layer, head)` pairs with an attention-weight tensor, sorted.
    pub fn attention_heads(&self) -> Vec<(usize, usize)> {
        let mut heads: Vec<_> = self
            .names()
            .filter_map(|n| names::parse_head_tensor(n, "attn_weights"))
            .collect();
        heads.sort_unstable();
        heads
    }

    /// Sorted positions singled out by recorded interventions.
    pub fn intervened_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .metadata
            .interventions
            .iter()
            .filter(|i| !matches!(i, Intervention::FirstTokenOverride { .. }))
            .filter_map(Intervention::position)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn tensor_file(name: &str) -> String {
    format!("{name}.bin")
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_capture(capture: &Capture, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    // Files from a capture previously written here would become orphans.
    let manifest_path = dir.join(MANIFEST_FILE);
    if let Ok(old) = fs::read_to_string(&manifest_path) {
        if let Ok(old) = serde_json::from_str::<Manifest>(&old) {
            for entry in old.tensors.iter().filter(|e| is_plain_file_name(&e.file)) {
                let _ = fs::remove_file(dir.join(&entry.file));
            }
        }
    }

    let mut entries = Vec::with_capacity(capture.len());
    for (name, tensor) in capture.tensors() {
        if !is_valid_name(name) {
            return Err(Error::Manifest(format!("invalid tensor name {name:?}")));
        }
        let file = tensor_file(name);
        let path = dir.join(&file);
        fs::write(&path, encode(tensor)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: DTYPE_F32.to_string(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        model_config: capture.model_config.clone(),
        metadata: capture.metadata.clone(),
        tensors: entries,
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

fn is_plain_file_name(file: &str) -> bool {
    !file.is_empty() && file != "." && file != ".." && !file.contains(['/', '\\'])
}

pub fn read_capture(dir: &Path) -> Result<Capture> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Manifest(format!(
            "unknown format {:?}, expected {FORMAT_NAME:?}",
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format version {}",
            manifest.version
        )));
    }

    let mut capture = Capture::new(manifest.metadata);
    capture.model_config = manifest.model_config;
    for entry in manifest.tensors {
        let name = entry.name;
        if entry.dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        if !is_plain_file_name(&entry.file) {
            return Err(Error::Manifest(format!(
                "tensor {name}: file {:?} must be a plain name inside the capture directory",
                entry.file
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile { name, path })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let count: usize = entry.shape.iter().product();
        let expected = count as u64 * 4;
        if entry.shape.is_empty() || count == 0 || bytes.len() as u64 != expected {
            return Err(Error::LengthMismatch {
                name,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape, data)
            .map_err(|e| Error::Manifest(format!("tensor {name}: {e}")))?;
        capture.insert(name, tensor)?;
    }
    Ok(capture)
}

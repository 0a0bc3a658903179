//! Binary checkpoints: one JSON header line, then little-endian `f32` blocks.
//!
//! The header records the block names and lengths in storage order together
//! with a SHA-256 of the payload, so truncation and bit rot are both caught
//! on load.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use crate::data::sha256_hex;
use crate::nnet::{Architecture, MiniModel, ParamGroup};
use crate::prompt::{PromptRole, VisualPrompt};
use crate::{Error, Geometry, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    kind: String,
    meta: Value,
    blocks: Vec<BlockInfo>,
    payload_sha256: String,
}

/// A typed header plus named `f32` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Map<String, Value>,
    blocks: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: serde_json::Map::new(),
            blocks: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: &impl Serialize) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self, key: &str) -> Result<M> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("{} checkpoint has no `{key}` entry", self.kind)))?;
        Ok(M::deserialize(v)?)
    }

    pub fn push_block(&mut self, name: impl Into<String>, data: Vec<f32>) {
        self.blocks.push((name.into(), data));
    }

    pub fn block(&self, name: &str) -> Result<&[f32]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Invalid(format!("{} checkpoint has no block `{name}`", self.kind)))
    }

    pub fn block_infos(&self) -> Vec<BlockInfo> {
        self.blocks
            .iter()
            .map(|(name, d)| BlockInfo { name: name.clone(), len: d.len() })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<u8> = self
            .blocks
            .iter()
            .flat_map(|(_, d)| d.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let header = Header {
            format: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: Value::Object(self.meta.clone()),
            blocks: self.block_infos(),
            payload_sha256: sha256_hex(&payload),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
            offset: bytes.len(),
            message: "missing header terminator".into(),
        })?;
        let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("bad header: {e}"),
        })?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unsupported format version {}", header.format),
            });
        }
        let payload = &bytes[newline + 1..];
        let expected: usize = header.blocks.iter().map(|b| 4 * b.len).sum();
        if payload.len() != expected {
            return Err(Error::Parse {
                offset: newline + 1,
                message: format!("payload is {} bytes, header promises {expected}", payload.len()),
            });
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(Error::Parse {
                offset: newline + 1,
                message: "payload checksum mismatch".into(),
            });
        }
        let mut blocks = Vec::with_capacity(header.blocks.len());
        let mut at = 0;
        for info in &header.blocks {
            let data = payload[at..at + 4 * info.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            at += 4 * info.len;
            blocks.push((info.name.clone(), data));
        }
        let meta = match header.meta {
            Value::Object(m) => m,
            _ => {
                return Err(Error::Parse { offset: 0, message: "header meta must be an object".into() })
            }
        };
        Ok(Self { kind: header.kind, meta, blocks })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads a checkpoint and checks its kind; any defect becomes [`Error::Artifact`].
    pub fn read(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let artifact = |reason: String| Error::Artifact { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| artifact(e.to_string()))?;
        let ckpt = Self::from_bytes(&bytes).map_err(|e| artifact(e.to_string()))?;
        if ckpt.kind != kind {
            return Err(artifact(format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptHeader {
    pub p: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub role: PromptRole,
}

impl PromptHeader {
    pub fn of(prompt: &VisualPrompt<f32>) -> Self {
        let g = prompt.geometry();
        Self {
            p: prompt.width(),
            channels: g.channels,
            height: g.height,
            width: g.width,
            role: prompt.role(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub arch: Architecture,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub frozen_encoder: bool,
    pub frozen_classifier: bool,
    pub tensors: Vec<BlockInfo>,
}

impl ModelHeader {
    pub fn of(model: &MiniModel<f32>) -> Self {
        let arch = *model.architecture();
        Self {
            arch,
            feature_dim: arch.feature_dim,
            num_classes: arch.num_classes,
            frozen_encoder: model.is_frozen(ParamGroup::Encoder),
            frozen_classifier: model.is_frozen(ParamGroup::Classifier),
            tensors: model
                .tensors()
                .iter()
                .map(|t| BlockInfo { name: t.name.to_string(), len: t.data.len() })
                .collect(),
        }
    }
}

/// Stores `prompt` under meta key and block name `key`.
pub fn push_prompt(ckpt: &mut Checkpoint, key: &str, prompt: &VisualPrompt<f32>) -> Result<()> {
    ckpt.set_meta(key, &PromptHeader::of(prompt))?;
    ckpt.push_block(key, prompt.params().to_vec());
    Ok(())
}

pub fn take_prompt(ckpt: &Checkpoint, key: &str) -> Result<VisualPrompt<f32>> {
    let h: PromptHeader = ckpt.meta(key)?;
    VisualPrompt::from_params(
        h.role,
        h.p,
        Geometry::new(h.channels, h.height, h.width),
        ckpt.block(key)?.to_vec(),
    )
}

/// Stores every tensor of `model` as block `{key}.{tensor name}`.
pub fn push_model(ckpt: &mut Checkpoint, key: &str, model: &MiniModel<f32>) -> Result<()> {
    ckpt.set_meta(key, &ModelHeader::of(model))?;
    for t in model.tensors() {
        ckpt.push_block(format!("{key}.{}", t.name), t.data.clone());
    }
    Ok(())
}

pub fn take_model(ckpt: &Checkpoint, key: &str) -> Result<MiniModel<f32>> {
    let h: ModelHeader = ckpt.meta(key)?;
    let buffers = h
        .arch
        .layout()
        .iter()
        .map(|(name, _, _)| ckpt.block(&format!("{key}.{name}")).map(<[f32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let mut model = MiniModel::from_buffers(h.arch, buffers)?;
    model.set_frozen(ParamGroup::Encoder, h.frozen_encoder);
    model.set_frozen(ParamGroup::Classifier, h.frozen_classifier);
    Ok(model)
}

pub fn save_prompt(path: impl AsRef<Path>, prompt: &VisualPrompt<f32>) -> Result<()> {
    let mut ckpt = Checkpoint::new("prompt");
    push_prompt(&mut ckpt, "prompt", prompt)?;
    ckpt.write(path)
}

pub fn load_prompt(path: impl AsRef<Path>) -> Result<VisualPrompt<f32>> {
    take_prompt(&Checkpoint::read(path, "prompt")?, "prompt")
}

pub fn save_model(path: impl AsRef<Path>, model: &MiniModel<f32>) -> Result<()> {
    let mut ckpt = Checkpoint::new("model");
    push_model(&mut ckpt, "model", model)?;
    ckpt.write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MiniModel<f32>> {
    take_model(&Checkpoint::read(path, "model")?, "model")
}

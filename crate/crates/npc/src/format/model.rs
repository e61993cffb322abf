//! `.npcm`: magic `NPCM`, version, `u64` manifest length, JSON manifest,
//! then one blob of `f32` values. Tensor offsets count from the blob start.

use npc_core::{Layer, LayerKind, Model, PostOp, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    f32s_le, hash_hex, parse_hash, read_f32s, write_header, write_json, FormatError, FormatResult,
    Reader,
};

const MAGIC: &[u8; 4] = b"NPCM";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    class_count: usize,
    content_hash: String,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Dense {
        post: Vec<PostEntry>,
        tensors: Vec<TensorEntry>,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        post: Vec<PostEntry>,
        tensors: Vec<TensorEntry>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum PostEntry {
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

impl From<PostOp> for PostEntry {
    fn from(op: PostOp) -> Self {
        match op {
            PostOp::Relu => PostEntry::Relu,
            PostOp::MaxPool { window, stride } => PostEntry::MaxPool { window, stride },
            PostOp::Flatten => PostEntry::Flatten,
        }
    }
}

impl From<&PostEntry> for PostOp {
    fn from(op: &PostEntry) -> Self {
        match *op {
            PostEntry::Relu => PostOp::Relu,
            PostEntry::MaxPool { window, stride } => PostOp::MaxPool { window, stride },
            PostEntry::Flatten => PostOp::Flatten,
        }
    }
}

pub fn save_model(model: &Model) -> Vec<u8> {
    let mut blob = Vec::new();
    let entry = |name: &str, t: &Tensor, blob: &mut Vec<u8>| {
        let e = TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            byte_offset: blob.len() as u64,
        };
        f32s_le(t.data().iter().copied(), blob);
        e
    };
    let layers = model
        .layers()
        .iter()
        .map(|layer| {
            let post = layer.post.iter().map(|&p| p.into()).collect();
            match &layer.kind {
                LayerKind::Dense { weight, bias } => LayerEntry::Dense {
                    post,
                    tensors: vec![
                        entry("weight", weight, &mut blob),
                        entry("bias", bias, &mut blob),
                    ],
                },
                LayerKind::Conv2d {
                    kernels,
                    bias,
                    stride,
                    padding,
                } => LayerEntry::Conv2d {
                    stride: *stride,
                    padding: *padding,
                    post,
                    tensors: vec![
                        entry("kernels", kernels, &mut blob),
                        entry("bias", bias, &mut blob),
                    ],
                },
            }
        })
        .collect();
    let manifest = Manifest {
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        content_hash: hash_hex(model.content_hash()),
        layers,
    };
    let mut out = Vec::with_capacity(blob.len() + 512);
    write_header(&mut out, MAGIC);
    write_json(&mut out, &manifest);
    out.extend_from_slice(&blob);
    out
}

pub fn load_model(bytes: &[u8]) -> FormatResult<Model> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, "model (.npcm)")?;
    let manifest_at = r.pos() + 8;
    let manifest: Manifest = r.json("manifest")?;
    let blob_start = r.pos();
    let blob = &bytes[blob_start..];
    let invalid = |message: String| FormatError::Invalid {
        offset: manifest_at,
        message,
    };

    let mut used = 0usize;
    let mut tensor = |tensors: &[TensorEntry], name: &str| -> FormatResult<Tensor> {
        let e = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| invalid(format!("layer lacks tensor {name:?}")))?;
        let count = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| invalid(format!("tensor {name:?} is too large")))?;
        let start = usize::try_from(e.byte_offset)
            .map_err(|_| invalid(format!("offset of {name:?} out of range")))?;
        let end = start
            .checked_add(count)
            .ok_or_else(|| invalid(format!("offset of {name:?} out of range")))?;
        if end > blob.len() {
            return Err(FormatError::Truncated {
                offset: blob_start + start.min(blob.len()),
                what: "tensor data",
                needed: count,
                available: blob.len().saturating_sub(start),
            });
        }
        used = used.max(end);
        Ok(Tensor::new(e.shape.clone(), read_f32s(&blob[start..end]))?)
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(match entry {
            LayerEntry::Dense { post, tensors } => Layer::dense(
                tensor(tensors, "weight")?,
                tensor(tensors, "bias")?,
                post.iter().map(PostOp::from).collect(),
            ),
            LayerEntry::Conv2d {
                stride,
                padding,
                post,
                tensors,
            } => Layer::conv2d(
                tensor(tensors, "kernels")?,
                tensor(tensors, "bias")?,
                *stride,
                *padding,
                post.iter().map(PostOp::from).collect(),
            ),
        });
    }
    if used != blob.len() {
        return Err(FormatError::Trailing {
            offset: blob_start + used,
            count: blob.len() - used,
        });
    }
    let model = Model::new(manifest.input_shape, layers)?;
    if model.class_count() != manifest.class_count {
        return Err(invalid(format!(
            "manifest declares {} classes, layers produce {}",
            manifest.class_count,
            model.class_count()
        )));
    }
    let declared = parse_hash(&manifest.content_hash)
        .ok_or_else(|| invalid("content_hash is not 16 hex digits".into()))?;
    if declared != model.content_hash() {
        return Err(invalid(format!(
            "content_hash {} does not match the stored weights ({})",
            manifest.content_hash,
            hash_hex(model.content_hash())
        )));
    }
    Ok(model)
}

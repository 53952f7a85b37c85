//! Bit-exact artifact persistence.
//!
//! A checkpoint is one file: an 8-byte magic, a little-endian u64 manifest
//! length, the manifest JSON, then the raw little-endian f64 tensor blob in
//! manifest order. Every tensor carries a SHA-256 over its blob slice;
//! loading validates all checksums before constructing anything, so a
//! truncated or corrupted file never yields a partial artifact. Saving a
//! loaded checkpoint reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::experts::{ExpertAdapter, ExpertKind, SourceArtifact};
use crate::gating::GateLayer;
use crate::prompts::TaskPrompt;
use crate::tensor::ParamTensor;
use crate::training::TargetArtifact;

const MAGIC: &[u8; 8] = b"MOMECKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub task_id: String,
    pub file_name: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: u32,
    pub seed: u64,
    pub task_id: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_kind: Option<ExpertKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_refs: Vec<SourceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_meta: Option<TargetMeta>,
    pub tensors: Vec<TensorEntry>,
    /// Resolved configuration echo for provenance.
    pub config_snapshot: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub use_correlation: bool,
    pub use_moe: bool,
    pub scale_correlation_attention: bool,
    pub adapter_residual: bool,
    pub final_gate_means: Vec<Vec<f64>>,
}

/// A digest over the manifest's per-tensor checksums; identifies the
/// artifact contents independent of file location.
pub fn manifest_digest(manifest: &Manifest) -> String {
    let mut hasher = Sha256::new();
    for t in &manifest.tensors {
        hasher.update(t.name.as_bytes());
        hasher.update(t.sha256.as_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_bytes(p: &ParamTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.data.len() * 8);
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_file(
    path: &Path,
    mut manifest: Manifest,
    tensors: &[(String, &ParamTensor)],
) -> Result<()> {
    let mut blob = Vec::new();
    manifest.tensors = tensors
        .iter()
        .map(|(name, p)| {
            let offset = blob.len() as u64;
            let bytes = tensor_bytes(p);
            let sha256 = hex(&Sha256::digest(&bytes));
            blob.extend_from_slice(&bytes);
            TensorEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                dtype: "f64".to_string(),
                offset,
                len: p.numel() as u64,
                sha256,
            }
        })
        .collect();
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse and fully validate a checkpoint file. Every tensor checksum must
/// match before anything is returned.
pub fn read_file(path: &Path) -> Result<(Manifest, Vec<ParamTensor>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::Checkpoint(format!(
            "{}: truncated manifest",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    let blob = &bytes[16 + mlen..];

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let nbytes = entry.len as usize * 8;
        if start + nbytes > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: blob truncated (checksum cannot match)",
                entry.name
            )));
        }
        let slice = &blob[start..start + nbytes];
        let got = hex(&Sha256::digest(slice));
        if got != entry.sha256 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: checksum mismatch",
                entry.name
            )));
        }
        if entry.shape.iter().product::<usize>() != entry.len as usize {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let data = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ParamTensor::new(entry.shape.clone(), data));
    }
    Ok((manifest, tensors))
}

// ── stage-1 artifacts ────────────────────────────────────────────────

pub fn save_source(
    path: &Path,
    artifact: &SourceArtifact,
    model: &ModelConfig,
    seed: u64,
    config_snapshot: serde_json::Value,
) -> Result<()> {
    let kind = artifact.experts.first().map(|e| e.kind);
    let manifest = Manifest {
        format_version: 1,
        stage: 1,
        seed,
        task_id: artifact.task_id.clone(),
        model: model.clone(),
        expert_kind: kind,
        description_text: Some(artifact.description_text.clone()),
        source_refs: Vec::new(),
        target_meta: None,
        tensors: Vec::new(),
        config_snapshot,
    };
    let mut tensors: Vec<(String, &ParamTensor)> =
        vec![("prompt".to_string(), &artifact.prompt.matrix)];
    for (slot, e) in artifact.experts.iter().enumerate() {
        tensors.push((format!("expert.{slot}.w_down"), &e.w_down));
        tensors.push((format!("expert.{slot}.w_up"), &e.w_up));
    }
    write_file(path, manifest, &tensors)
}

pub fn load_source(path: &Path) -> Result<(SourceArtifact, Manifest)> {
    let (manifest, tensors) = read_file(path)?;
    if manifest.stage != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: expected a stage-1 checkpoint, found stage {}",
            path.display(),
            manifest.stage
        )));
    }
    let kind = manifest.expert_kind.unwrap_or(ExpertKind::Lora);
    let mut prompt = None;
    let mut experts: Vec<Option<ExpertAdapter>> = Vec::new();
    for (entry, tensor) in manifest.tensors.iter().zip(tensors) {
        if entry.name == "prompt" {
            prompt = Some(TaskPrompt { matrix: tensor, task_id: manifest.task_id.clone() });
            continue;
        }
        let Some(rest) = entry.name.strip_prefix("expert.") else {
            return Err(Error::Checkpoint(format!("unexpected tensor {}", entry.name)));
        };
        let (slot_s, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
        let slot: usize = slot_s
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad slot in {}", entry.name)))?;
        while experts.len() <= slot {
            experts.push(None);
        }
        let e = experts[slot].get_or_insert_with(|| ExpertAdapter {
            w_down: ParamTensor::zeros(vec![1, 1]),
            w_up: ParamTensor::zeros(vec![1, 1]),
            kind,
            layer_index: slot,
            task_id: manifest.task_id.clone(),
        });
        match field {
            "w_down" => e.w_down = tensor,
            "w_up" => e.w_up = tensor,
            other => {
                return Err(Error::Checkpoint(format!("unexpected expert field {other}")));
            }
        }
    }
    let experts: Vec<ExpertAdapter> = experts
        .into_iter()
        .enumerate()
        .map(|(slot, e)| {
            e.ok_or_else(|| Error::Checkpoint(format!("missing expert for slot {slot}")))
        })
        .collect::<Result<_>>()?;
    let artifact = SourceArtifact {
        task_id: manifest.task_id.clone(),
        prompt: prompt.ok_or_else(|| Error::Checkpoint("missing prompt tensor".to_string()))?,
        experts,
        description_text: manifest.description_text.clone().unwrap_or_default(),
    };
    Ok((artifact, manifest))
}

// ── stage-2 artifacts ────────────────────────────────────────────────

pub fn save_target(
    path: &Path,
    artifact: &TargetArtifact,
    model: &ModelConfig,
    seed: u64,
    source_refs: Vec<SourceRef>,
    config_snapshot: serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        format_version: 1,
        stage: 2,
        seed,
        task_id: artifact.task_id.clone(),
        model: model.clone(),
        expert_kind: None,
        description_text: None,
        source_refs,
        target_meta: Some(TargetMeta {
            use_correlation: artifact.use_correlation,
            use_moe: artifact.use_moe,
            scale_correlation_attention: artifact.scale_correlation_attention,
            adapter_residual: artifact.adapter_residual,
            final_gate_means: artifact.final_gate_means.clone(),
        }),
        tensors: Vec::new(),
        config_snapshot,
    };
    let mut tensors: Vec<(String, &ParamTensor)> = Vec::new();
    if let Some(tp) = &artifact.target_prompt {
        tensors.push(("target_prompt".to_string(), &tp.matrix));
    }
    for (slot, g) in artifact.gates.iter().enumerate() {
        tensors.push((format!("gate.{slot}"), &g.w_gate));
    }
    for (slot, a) in artifact.adapters.iter().enumerate() {
        tensors.push((format!("adapter.{slot}.w_down"), &a.w_down));
        tensors.push((format!("adapter.{slot}.w_up"), &a.w_up));
    }
    for (name, p) in &artifact.layer_norms {
        tensors.push((name.clone(), p));
    }
    write_file(path, manifest, &tensors)
}

pub fn load_target(path: &Path) -> Result<(TargetArtifact, Manifest)> {
    let (manifest, tensors) = read_file(path)?;
    if manifest.stage != 2 {
        return Err(Error::Checkpoint(format!(
            "{}: expected a stage-2 checkpoint, found stage {}",
            path.display(),
            manifest.stage
        )));
    }
    let meta = manifest
        .target_meta
        .clone()
        .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint missing target metadata".into()))?;
    let n_enc = manifest.model.n_layers_enc;
    let mut target_prompt = None;
    let mut gates: Vec<Option<GateLayer>> = Vec::new();
    let mut adapters: Vec<Option<ExpertAdapter>> = Vec::new();
    let mut layer_norms = Vec::new();
    for (entry, tensor) in manifest.tensors.iter().zip(tensors) {
        if entry.name == "target_prompt" {
            target_prompt =
                Some(TaskPrompt { matrix: tensor, task_id: manifest.task_id.clone() });
        } else if let Some(slot_s) = entry.name.strip_prefix("gate.") {
            let slot: usize = slot_s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad slot in {}", entry.name)))?;
            while gates.len() <= slot {
                gates.push(None);
            }
            let (block_kind, layer_index) = if slot < n_enc {
                (BlockKind::Encoder, slot)
            } else {
                (BlockKind::Decoder, slot - n_enc)
            };
            gates[slot] = Some(GateLayer { w_gate: tensor, layer_index, block_kind });
        } else if let Some(rest) = entry.name.strip_prefix("adapter.") {
            let (slot_s, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
            let slot: usize = slot_s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad slot in {}", entry.name)))?;
            while adapters.len() <= slot {
                adapters.push(None);
            }
            let a = adapters[slot].get_or_insert_with(|| ExpertAdapter {
                w_down: ParamTensor::zeros(vec![1, 1]),
                w_up: ParamTensor::zeros(vec![1, 1]),
                kind: ExpertKind::Adapter,
                layer_index: slot,
                task_id: manifest.task_id.clone(),
            });
            match field {
                "w_down" => a.w_down = tensor,
                "w_up" => a.w_up = tensor,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unexpected adapter field {other}"
                    )));
                }
            }
        } else if entry.name.starts_with("backbone.") {
            layer_norms.push((entry.name.clone(), tensor));
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {}", entry.name)));
        }
    }
    let artifact = TargetArtifact {
        task_id: manifest.task_id.clone(),
        target_prompt,
        gates: gates
            .into_iter()
            .enumerate()
            .map(|(slot, g)| {
                g.ok_or_else(|| Error::Checkpoint(format!("missing gate for slot {slot}")))
            })
            .collect::<Result<_>>()?,
        adapters: adapters
            .into_iter()
            .enumerate()
            .map(|(slot, a)| {
                a.ok_or_else(|| Error::Checkpoint(format!("missing adapter for slot {slot}")))
            })
            .collect::<Result<_>>()?,
        layer_norms,
        source_task_ids: manifest.source_refs.iter().map(|r| r.task_id.clone()).collect(),
        use_correlation: meta.use_correlation,
        use_moe: meta.use_moe,
        scale_correlation_attention: meta.scale_correlation_attention,
        adapter_residual: meta.adapter_residual,
        final_gate_means: meta.final_gate_means,
    };
    Ok((artifact, manifest))
}

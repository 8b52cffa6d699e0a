//! JSON session files.
//!
//! Feature maps are stored as base64 little-endian `f32` blocks (one per
//! sample, channel-major) and head parameters as base64 little-endian `f64`,
//! so a save/load round trip is bit-exact. Wall-clock training time is not
//! written, which keeps files byte-identical across reruns.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{LabelDef, SampleStore, SessionState, TeachingSession, TrainingSummary};
use crate::backbone::{Backbone, FeatureShape, FeatureTensor};
use crate::error::{Error, Result};
use crate::trainer::{LinearHead, TrainConfig};

pub const SESSION_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    version: u32,
    seed: u64,
    backbone_id: String,
    labels: Vec<LabelDef>,
    config: TrainConfig,
    samples: Vec<SampleBlocks>,
    head: Option<HeadRecord>,
    #[serde(default)]
    training: Option<TrainingSummary>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleBlocks {
    label_id: usize,
    h: usize,
    w: usize,
    k: usize,
    blocks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRecord {
    classes: usize,
    features: usize,
    weights: String,
    bias: String,
    #[serde(default)]
    stale: bool,
}

fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn invalid(detail: impl Into<String>) -> Error {
    Error::Parse { offset: None, detail: detail.into() }
}

fn decode_bytes(text: &str, width: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = B64.decode(text).map_err(|e| invalid(format!("{what}: bad base64: {e}")))?;
    if bytes.len() % width != 0 {
        return Err(invalid(format!("{what}: {} bytes is not a multiple of {width}", bytes.len())));
    }
    Ok(bytes)
}

fn decode_f32(text: &str, what: &str) -> Result<Vec<f32>> {
    Ok(decode_bytes(text, 4, what)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect())
}

fn decode_f64(text: &str, what: &str) -> Result<Vec<f64>> {
    Ok(decode_bytes(text, 8, what)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub(super) fn to_json(session: &TeachingSession) -> Result<String> {
    if session.state == SessionState::Training {
        return Err(Error::WrongState("cannot save while training".into()));
    }
    let shape = session.store.shape;
    let file = SessionFile {
        version: SESSION_FORMAT_VERSION,
        seed: session.seed,
        backbone_id: session.backbone_id.clone(),
        labels: session.labels.clone(),
        config: session.config,
        samples: session
            .store
            .per_label
            .iter()
            .enumerate()
            .map(|(label_id, samples)| SampleBlocks {
                label_id,
                h: shape.h,
                w: shape.w,
                k: shape.k,
                blocks: samples.iter().map(|f| encode_f32(f.maps())).collect(),
            })
            .collect(),
        head: session.head.as_ref().map(|h| HeadRecord {
            classes: h.classes(),
            features: h.features(),
            weights: encode_f64(h.weights()),
            bias: encode_f64(h.bias()),
            stale: session.head_stale,
        }),
        training: session.summary.clone(),
    };
    serde_json::to_string(&file).map_err(|e| invalid(e.to_string()))
}

pub(super) fn from_json(text: &str, backbone: &Backbone) -> Result<TeachingSession> {
    let file: SessionFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: Some(byte_offset(text, e.line(), e.column())),
        detail: e.to_string(),
    })?;
    if file.version != SESSION_FORMAT_VERSION {
        return Err(invalid(format!("unsupported session version {}", file.version)));
    }
    if file.backbone_id != backbone.id() {
        return Err(Error::Compatibility {
            expected: file.backbone_id,
            found: backbone.id().to_string(),
        });
    }
    file.config.validate().map_err(|e| invalid(e.to_string()))?;

    for (i, label) in file.labels.iter().enumerate() {
        if label.id != i {
            return Err(invalid(format!("label ids must be dense, found {} at position {i}", label.id)));
        }
        if label.name.is_empty() || file.labels[..i].iter().any(|l| l.name == label.name) {
            return Err(invalid(format!("label name {:?} is empty or repeated", label.name)));
        }
    }

    let shape = backbone.output_shape();
    let mut per_label = vec![Vec::new(); file.labels.len()];
    let mut seen = vec![false; file.labels.len()];
    for group in &file.samples {
        let declared = FeatureShape { h: group.h, w: group.w, k: group.k };
        if declared != shape {
            return Err(invalid(format!("samples declare shape {declared}, backbone produces {shape}")));
        }
        let slot = seen
            .get_mut(group.label_id)
            .ok_or_else(|| invalid(format!("samples for unknown label {}", group.label_id)))?;
        if std::mem::replace(slot, true) {
            return Err(invalid(format!("label {} has two sample groups", group.label_id)));
        }
        for (i, block) in group.blocks.iter().enumerate() {
            let what = format!("label {} sample {i}", group.label_id);
            let maps = decode_f32(block, &what)?;
            let tensor = FeatureTensor::from_maps(shape, maps).map_err(|e| invalid(format!("{what}: {e}")))?;
            per_label[group.label_id].push(tensor);
        }
    }

    let (head, head_stale) = match file.head {
        Some(rec) => {
            if rec.classes != file.labels.len() || rec.features != shape.k {
                return Err(invalid(format!(
                    "head is {}x{}, session needs {}x{}",
                    rec.classes,
                    rec.features,
                    file.labels.len(),
                    shape.k
                )));
            }
            let head = LinearHead::new(
                rec.classes,
                rec.features,
                decode_f64(&rec.weights, "head weights")?,
                decode_f64(&rec.bias, "head bias")?,
            )
            .map_err(|e| invalid(e.to_string()))?;
            (Some(head), rec.stale)
        }
        None => (None, false),
    };
    let state = if head.is_some() && !head_stale {
        SessionState::Evaluating
    } else {
        SessionState::Teaching
    };
    Ok(TeachingSession {
        labels: file.labels,
        store: SampleStore { shape, per_label },
        state,
        head,
        head_stale,
        summary: file.training,
        last_report: None,
        config: file.config,
        seed: file.seed,
        backbone_id: file.backbone_id,
    })
}

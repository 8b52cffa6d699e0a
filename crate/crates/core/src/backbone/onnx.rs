//! ONNX backbones executed with tract.
//!
//! The tapped tensor is the input of the last global pooling node in the
//! graph (`GlobalAveragePool`, a spatial `ReduceMean`, or an `AveragePool`
//! whose kernel covers the whole map), provided a convolution sits somewhere
//! upstream of it. ONNX convolutions are NCHW, so the tap is `[1, K, h, w]`
//! whatever the layout of the image input.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use tract_onnx::pb::{self, AttributeProto, GraphProto, NodeProto};
use tract_onnx::prelude::*;

use super::preprocess::ModelInput;
use super::{sha256_hex, FeatureShape, InputSpec, INPUT_SIDE};
use crate::error::{Error, Result};

const CONV_OPS: &[&str] = &["Conv", "ConvInteger", "QLinearConv", "ConvTranspose"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Nchw,
    Nhwc,
}

pub(crate) struct OnnxEngine {
    plan: Arc<TypedRunnableModel>,
    layout: Layout,
    side: usize,
}

pub(crate) struct Loaded {
    pub id: String,
    pub input: InputSpec,
    pub output: FeatureShape,
    pub engine: OnnxEngine,
}

#[derive(Debug)]
struct Tap {
    tensor: String,
    /// Kernel of an `AveragePool` tap, checked once shapes are known.
    pool_kernel: Option<Vec<i64>>,
}

pub(crate) fn load(path: &Path) -> Result<Loaded> {
    let load_err = |reason: String| Error::Load { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| load_err(e.to_string()))?;
    let id = sha256_hex(&bytes);
    let proto = onnx()
        .proto_model_for_read(&mut bytes.as_slice())
        .map_err(|e| load_err(format!("not an ONNX model: {e}")))?;
    let graph = proto
        .graph
        .as_ref()
        .ok_or_else(|| load_err("model has no graph".into()))?;

    let (layout, side) = input_layout(graph)?;
    let tap = find_tap(graph)?;

    let shape: [usize; 4] = match layout {
        Layout::Nchw => [1, 3, side, side],
        Layout::Nhwc => [1, side, side, 3],
    };
    let typed = onnx()
        .model_for_proto_model(&proto)
        .and_then(|m| m.with_input_fact(0, f32::fact(shape).into()))
        .and_then(|m| m.with_outputs_by_name([tap.tensor.as_str()]))
        .and_then(|m| m.into_optimized())
        .map_err(|e| load_err(format!("{e:#}")))?;
    let fact = typed.output_fact(0).map_err(|e| load_err(e.to_string()))?;
    let dims: Vec<usize> = fact
        .shape
        .as_concrete()
        .ok_or_else(|| Error::UnsupportedModel(format!("tapped tensor {:?} has a symbolic shape", tap.tensor)))?
        .to_vec();
    let output = match dims.as_slice() {
        [1, k, h, w] if *k > 0 && *h > 0 && *w > 0 => FeatureShape { h: *h, w: *w, k: *k },
        _ => {
            return Err(Error::UnsupportedModel(format!(
                "tapped tensor {:?} has shape {dims:?}, expected [1, K, h, w]",
                tap.tensor
            )))
        }
    };
    if let Some(kernel) = &tap.pool_kernel {
        if kernel.as_slice() != [output.h as i64, output.w as i64] {
            return Err(Error::UnsupportedModel(format!(
                "AveragePool kernel {kernel:?} does not cover the {}x{} map",
                output.h, output.w
            )));
        }
    }
    let plan = typed.into_runnable().map_err(|e| load_err(e.to_string()))?;
    Ok(Loaded {
        id,
        input: InputSpec { side, range: (-1.0, 1.0) },
        output,
        engine: OnnxEngine { plan, layout, side },
    })
}

fn initializer_names(graph: &GraphProto) -> HashSet<&str> {
    graph.initializer.iter().map(|t| t.name.as_str()).collect()
}

/// Reads the image input's declared dims: `[N, 3, S, S]` or `[N, S, S, 3]`.
fn input_layout(graph: &GraphProto) -> Result<(Layout, usize)> {
    let inits = initializer_names(graph);
    let inputs: Vec<&pb::ValueInfoProto> = graph
        .input
        .iter()
        .filter(|i| !inits.contains(i.name.as_str()))
        .collect();
    let [input] = inputs.as_slice() else {
        return Err(Error::UnsupportedModel(format!(
            "expected exactly one image input, found {}",
            inputs.len()
        )));
    };
    let dims: Vec<Option<i64>> = input
        .r#type
        .as_ref()
        .and_then(|t| t.value.as_ref())
        .and_then(|pb::type_proto::Value::TensorType(t)| t.shape.as_ref())
        .map(|s| {
            s.dim
                .iter()
                .map(|d| match d.value {
                    Some(pb::tensor_shape_proto::dimension::Value::DimValue(v)) if v > 0 => Some(v),
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default();
    if dims.len() != 4 {
        return Err(Error::UnsupportedModel(format!(
            "input {:?} must be rank 4, declared rank {}",
            input.name,
            dims.len()
        )));
    }
    let side = |d: Option<i64>| d.map_or(INPUT_SIDE, |v| v as usize);
    match (dims[1], dims[3]) {
        (Some(3), _) => Ok((Layout::Nchw, side(dims[2]))),
        (_, Some(3)) => Ok((Layout::Nhwc, side(dims[1]))),
        _ => Err(Error::UnsupportedModel(format!(
            "cannot tell channel axis of input {:?} with dims {dims:?}",
            input.name
        ))),
    }
}

fn attr<'a>(node: &'a NodeProto, name: &str) -> Option<&'a AttributeProto> {
    node.attribute.iter().find(|a| a.name == name)
}

fn is_spatial_reduce(node: &NodeProto, graph: &GraphProto) -> bool {
    let axes: Vec<i64> = if let Some(a) = attr(node, "axes") {
        a.ints.clone()
    } else if let Some(name) = node.input.get(1) {
        match graph.initializer.iter().find(|t| &t.name == name) {
            Some(t) if !t.int64_data.is_empty() => t.int64_data.clone(),
            Some(t) => t
                .raw_data
                .chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            None => return false,
        }
    } else {
        return false;
    };
    let mut norm: Vec<i64> = axes.iter().map(|&a| if a < 0 { a + 4 } else { a }).collect();
    norm.sort_unstable();
    norm == [2, 3]
}

fn find_tap(graph: &GraphProto) -> Result<Tap> {
    let pool = graph.node.iter().rev().find_map(|n| match n.op_type.as_str() {
        "GlobalAveragePool" => Some((n, None)),
        "ReduceMean" if is_spatial_reduce(n, graph) => Some((n, None)),
        "AveragePool" => attr(n, "kernel_shape").map(|a| (n, Some(a.ints.clone()))),
        _ => None,
    });
    let Some((pool, pool_kernel)) = pool else {
        return Err(Error::UnsupportedModel(
            "no global pooling node; spatial feature maps are unavailable".into(),
        ));
    };
    let tensor = pool
        .input
        .first()
        .cloned()
        .ok_or_else(|| Error::UnsupportedModel(format!("pooling node {:?} has no input", pool.name)))?;

    let producers: HashMap<&str, &NodeProto> = graph
        .node
        .iter()
        .flat_map(|n| n.output.iter().map(move |o| (o.as_str(), n)))
        .collect();
    let mut stack = vec![tensor.as_str()];
    let mut seen = HashSet::new();
    let mut found_conv = false;
    while let Some(t) = stack.pop() {
        if !seen.insert(t) {
            continue;
        }
        if let Some(node) = producers.get(t) {
            if CONV_OPS.contains(&node.op_type.as_str()) {
                found_conv = true;
                break;
            }
            stack.extend(node.input.iter().map(String::as_str));
        }
    }
    if !found_conv {
        return Err(Error::UnsupportedModel(format!(
            "no convolution upstream of pooling node {:?}",
            pool.name
        )));
    }
    Ok(Tap { tensor, pool_kernel })
}

impl OnnxEngine {
    pub(crate) fn run(&self, input: &ModelInput, shape: FeatureShape) -> Result<Vec<f32>> {
        let s = self.side;
        let tensor: Tensor = match self.layout {
            Layout::Nhwc => tract_ndarray::Array4::from_shape_vec((1, s, s, 3), input.values().to_vec())
                .map_err(|e| Error::Inference(e.to_string()))?
                .into_tensor(),
            Layout::Nchw => {
                tract_ndarray::Array4::from_shape_fn((1, 3, s, s), |(_, c, y, x)| input.at(y, x, c)).into_tensor()
            }
        };
        let outputs = self
            .plan
            .run(tvec!(tensor.into()))
            .map_err(|e| Error::Inference(e.to_string()))?;
        let view = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Inference(e.to_string()))?;
        if view.shape() != [1, shape.k, shape.h, shape.w] {
            return Err(Error::Inference(format!(
                "model produced {:?}, declared [1, {}, {}, {}]",
                view.shape(),
                shape.k,
                shape.h,
                shape.w
            )));
        }
        Ok(view.iter().copied().collect())
    }
}

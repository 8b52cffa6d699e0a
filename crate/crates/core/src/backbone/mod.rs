//! Frozen convolutional feature extractors.
//!
//! A [`Backbone`] turns a preprocessed frame into a [`FeatureTensor`]: the
//! spatial activations of the last convolutional layer before global pooling,
//! together with their per-channel spatial means (the GAP vector). Two engines
//! are available: an ONNX model file (feature `onnx`) and a seeded synthetic
//! extractor addressed by a `test:<seed>:<K>:<h>:<w>` descriptor.

#[cfg(feature = "onnx")]
mod onnx;
mod preprocess;
mod synthetic;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use preprocess::{preprocess, preprocess_to, CropRegion, Frame, ModelInput, INPUT_SIDE};

use crate::error::{Error, Result};
use synthetic::SyntheticBackbone;

/// Spatial size and channel count of a feature tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl FeatureShape {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.k)
    }
}

/// Backbone output: `K` spatial maps of `h x w` plus their spatial means.
///
/// Maps are kept in 32-bit (the model boundary). The GAP vector is always
/// recomputed here in 64-bit, so `gap[k]` is exactly the mean the linear head
/// sees and the mean of any class activation map equals the logit minus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: FeatureShape,
    maps: Vec<f32>,
    gap: Vec<f64>,
}

impl FeatureTensor {
    /// `maps` is channel-major: `maps[k * h * w + y * w + x]`.
    pub fn from_maps(shape: FeatureShape, maps: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("feature shape must be positive"));
        }
        if maps.len() != shape.len() {
            return Err(Error::invalid(format!(
                "feature maps of shape {shape} need {} values, got {}",
                shape.len(),
                maps.len()
            )));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature maps must be finite"));
        }
        let cells = shape.cells();
        let gap = maps
            .chunks_exact(cells)
            .map(|m| m.iter().map(|&v| v as f64).sum::<f64>() / cells as f64)
            .collect();
        Ok(Self { shape, maps, gap })
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    /// Spatial map of channel `k`.
    pub fn map(&self, k: usize) -> &[f32] {
        let cells = self.shape.cells();
        &self.maps[k * cells..(k + 1) * cells]
    }

    pub fn gap(&self) -> &[f64] {
        &self.gap
    }
}

/// Input contract of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub side: usize,
    pub range: (f32, f32),
}

impl Default for InputSpec {
    fn default() -> Self {
        Self { side: INPUT_SIDE, range: (-1.0, 1.0) }
    }
}

enum Engine {
    Synthetic(SyntheticBackbone),
    #[cfg(feature = "onnx")]
    Onnx(onnx::OnnxEngine),
}

/// A loaded, immutable feature extractor. Cheap to share behind an `Arc`.
pub struct Backbone {
    id: String,
    source: String,
    input: InputSpec,
    output: FeatureShape,
    engine: Engine,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("id", &self.id)
            .field("source", &self.source)
            .field("input", &self.input)
            .field("output", &self.output)
            .finish()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a backbone from an ONNX file path or a `test:<seed>:<K>:<h>:<w>`
/// descriptor.
pub fn load_backbone(source: &str) -> Result<Backbone> {
    if let Some(rest) = source.strip_prefix("test:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::invalid(format!("bad test descriptor {source:?}, expected test:<seed>:<K>:<h>:<w>"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let seed: u64 = parts[0].parse().map_err(|_| bad())?;
        let nums: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        return make_test_backbone(seed, nums[0], nums[1], nums[2]);
    }
    load_model_file(Path::new(source))
}

#[cfg(feature = "onnx")]
fn load_model_file(path: &Path) -> Result<Backbone> {
    let loaded = onnx::load(path)?;
    Ok(Backbone {
        id: loaded.id,
        source: path.display().to_string(),
        input: loaded.input,
        output: loaded.output,
        engine: Engine::Onnx(loaded.engine),
    })
}

#[cfg(not(feature = "onnx"))]
fn load_model_file(path: &Path) -> Result<Backbone> {
    Err(Error::Load {
        path: path.to_path_buf(),
        reason: "built without the `onnx` feature".into(),
    })
}

/// Deterministic synthetic backbone; the same seed always yields the same
/// function.
pub fn make_test_backbone(seed: u64, k: usize, h: usize, w: usize) -> Result<Backbone> {
    let input = InputSpec::default();
    let output = FeatureShape { h, w, k };
    let engine = SyntheticBackbone::new(seed, output, input.side)?;
    let source = format!("test:{seed}:{k}:{h}:{w}");
    Ok(Backbone {
        id: sha256_hex(source.as_bytes()),
        source,
        input,
        output,
        engine: Engine::Synthetic(engine),
    })
}

impl Backbone {
    /// Content hash of the model file, or of the canonical test descriptor.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.output
    }

    pub fn extract(&self, input: &ModelInput) -> Result<FeatureTensor> {
        if input.side() != self.input.side {
            return Err(Error::invalid(format!(
                "backbone expects a {0}x{0} input, got {1}x{1}",
                self.input.side,
                input.side()
            )));
        }
        let maps = match &self.engine {
            Engine::Synthetic(s) => s.run(input),
            #[cfg(feature = "onnx")]
            Engine::Onnx(o) => o.run(input, self.output)?,
        };
        FeatureTensor::from_maps(self.output, maps)
    }

    /// `extract(preprocess(frame))` at this backbone's input size.
    pub fn features_for(&self, frame: &Frame) -> Result<FeatureTensor> {
        self.extract(&preprocess_to(frame, self.input.side)?)
    }
}

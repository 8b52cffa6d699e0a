use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{lerp, sample_taps};

/// Side of the square network input.
pub const INPUT_SIDE: usize = 224;

/// An RGB video frame, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    timestamp_ms: u64,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, timestamp_ms: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB frame needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels, timestamp_ms })
    }

    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels, 0)
    }

    pub fn from_rgb_image(image: image::RgbImage, timestamp_ms: u64) -> Result<Self> {
        let (w, h) = image.dimensions();
        Self::new(w as usize, h as usize, image.into_raw(), timestamp_ms)
    }

    /// Decodes a PNG or JPEG byte stream.
    pub fn decode(bytes: &[u8], timestamp_ms: u64) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        Self::from_rgb_image(img.to_rgb8(), timestamp_ms)
    }

    pub fn open(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        Self::from_rgb_image(img.to_rgb8(), 0)
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("frame buffer length is validated on construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn with_timestamp(mut self, timestamp_ms: u64) -> Self {
        self.timestamp_ms = timestamp_ms;
        self
    }

    pub fn crop_region(&self) -> CropRegion {
        CropRegion::centered(self.width, self.height)
    }
}

/// The largest centred square of a frame, in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl CropRegion {
    pub fn centered(width: usize, height: usize) -> Self {
        let side = width.min(height);
        Self { x: (width - side) / 2, y: (height - side) / 2, side }
    }
}

/// Network input: `side x side x 3`, HWC order, scaled to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    side: usize,
    values: Vec<f32>,
}

impl ModelInput {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        if side == 0 || values.len() != side * side * 3 {
            return Err(Error::invalid(format!(
                "model input of side {side} needs {} values, got {}",
                side * side * 3,
                values.len()
            )));
        }
        Ok(Self { side, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Value at pixel `(y, x)`, channel `c`.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.side + x) * 3 + c]
    }
}

/// Centre-crop to a square, bilinear-resize to 224x224 and map `[0, 255]`
/// onto `[-1, 1]`.
pub fn preprocess(frame: &Frame) -> Result<ModelInput> {
    preprocess_to(frame, INPUT_SIDE)
}

pub fn preprocess_to(frame: &Frame, side: usize) -> Result<ModelInput> {
    if side == 0 {
        return Err(Error::invalid("input side must be positive"));
    }
    let crop = frame.crop_region();
    let ys = sample_taps(crop.side, side);
    let xs = sample_taps(crop.side, side);
    let stride = frame.width * 3;
    let px = &frame.pixels;
    let at = |y: usize, x: usize, c: usize| px[(crop.y + y) * stride + (crop.x + x) * 3 + c] as f64;

    let mut values = vec![0f32; side * side * 3];
    par::for_each_row(&mut values, side * 3, side * 24, |y, row| {
        let ty = ys[y];
        for (x, tx) in xs.iter().enumerate() {
            for c in 0..3 {
                let upper = lerp(at(ty.lo, tx.lo, c), at(ty.lo, tx.hi, c), tx.frac);
                let lower = lerp(at(ty.hi, tx.lo, c), at(ty.hi, tx.hi, c), tx.frac);
                let v = lerp(upper, lower, ty.frac);
                row[x * 3 + c] = (v / 127.5 - 1.0) as f32;
            }
        }
    });
    Ok(ModelInput { side, values })
}

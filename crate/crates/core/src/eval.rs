//! Per-frame assessment and the latency benchmark.
//!
//! A frame goes through two timed stages:
//! * inference: preprocess, extract, forward, softmax, class selection, CAM;
//! * render: normalize and 8-bit encode the map, plus the upsampled colour
//!   overlay when one is requested.

use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, CropRegion, Frame};
use crate::error::{Error, Result};
use crate::saliency::{
    compute_cam, normalized, quantize, render_overlay_with, select_saliency_class, RenderOptions, SaliencyOverlay,
};
use crate::session::TeachingSession;
use crate::tensor::{softmax, Grid2D, Probabilities};
use crate::trainer::forward;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Latency {
    pub inference_ms: f64,
    pub render_ms: f64,
    pub total_ms: f64,
}

/// Monotonic stage marks for one frame.
#[derive(Debug, Clone, Copy)]
pub struct LatencyProbe {
    start: Instant,
    inference_done: Option<Instant>,
    render_done: Option<Instant>,
}

impl LatencyProbe {
    pub fn start() -> Self {
        Self { start: Instant::now(), inference_done: None, render_done: None }
    }

    pub fn mark_inference(&mut self) {
        self.inference_done = Some(Instant::now());
    }

    pub fn mark_render(&mut self) {
        self.render_done = Some(Instant::now());
    }

    pub fn finish(&self) -> Latency {
        let inf = self.inference_done.unwrap_or(self.start);
        let ren = self.render_done.unwrap_or(inf);
        let ms = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64() * 1e3;
        Latency {
            inference_ms: ms(self.start, inf),
            render_ms: ms(inf, ren),
            total_ms: ms(self.start, ren),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScore {
    pub label_id: usize,
    pub name: String,
    pub p: f64,
}

/// Normalized saliency grid as shipped to clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireSaliency {
    pub h: usize,
    pub w: usize,
    /// base64 of `h * w` bytes, row-major, `round(255 * value)`.
    pub q8: String,
    pub crop: CropRegion,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub scores: Vec<LabelScore>,
    pub probabilities: Probabilities,
    pub saliency_class: usize,
    /// Raw CAM values.
    pub cam: Grid2D,
    /// CAM scaled to `[0, 1]`.
    pub normalized: Grid2D,
    pub saliency: WireSaliency,
    pub overlay: Option<SaliencyOverlay>,
    pub latency: Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub selected_class: Option<usize>,
    /// Render a colour overlay at the crop square's size.
    pub render_overlay: bool,
    pub render: RenderOptions,
}

/// Scores one frame and computes the saliency map of the selected (or most
/// confident) class. Never mutates the session.
pub fn evaluate_frame(
    session: &TeachingSession,
    backbone: &Backbone,
    frame: &Frame,
    options: &EvalOptions,
) -> Result<PredictionResult> {
    let head = session.active_head()?;
    session.check_backbone(backbone)?;
    if let Some(c) = options.selected_class {
        if c >= session.labels().len() {
            return Err(Error::NotFound(format!("class {c} (have {} labels)", session.labels().len())));
        }
    }

    let mut probe = LatencyProbe::start();
    let features = backbone.features_for(frame)?;
    let probabilities = softmax(&forward(head, features.gap())?);
    let saliency_class = select_saliency_class(&probabilities, options.selected_class)?;
    let cam = compute_cam(&features, head, saliency_class)?.grid;
    probe.mark_inference();

    let norm = normalized(&cam, options.render);
    let crop = frame.crop_region();
    let saliency = WireSaliency {
        h: norm.height(),
        w: norm.width(),
        q8: B64.encode(quantize(&norm)),
        crop,
        class_id: saliency_class,
    };
    let overlay = if options.render_overlay {
        let grid = crate::saliency::SaliencyGrid { class_id: saliency_class, grid: cam.clone() };
        Some(render_overlay_with(&grid, crop.side, options.render)?)
    } else {
        None
    };
    probe.mark_render();

    let scores = session
        .labels()
        .iter()
        .zip(probabilities.values())
        .map(|(l, &p)| LabelScore { label_id: l.id, name: l.name.clone(), p })
        .collect();
    Ok(PredictionResult {
        scores,
        probabilities,
        saliency_class,
        cam,
        normalized: norm,
        saliency,
        overlay,
        latency: probe.finish(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub samples: Vec<f64>,
}

impl StageStats {
    /// Nearest-rank p95; median averages the middle pair for even counts.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self { mean: 0.0, median: 0.0, p95: 0.0, samples };
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            p95: sorted[rank - 1],
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub parallel: bool,
    pub inference_ms: StageStats,
    pub render_ms: StageStats,
    pub total_ms: StageStats,
    pub training_ms: Option<f64>,
}

/// Runs `evaluate_frame` on `n` frames (overlay rendering on).
pub fn bench(
    session: &TeachingSession,
    backbone: &Backbone,
    n: usize,
    mut frames: impl FnMut(usize) -> Frame,
    training_ms: Option<f64>,
) -> Result<BenchReport> {
    session.active_head()?;
    let options = EvalOptions { render_overlay: true, ..Default::default() };
    let mut lat = Vec::with_capacity(n);
    for i in 0..n {
        lat.push(evaluate_frame(session, backbone, &frames(i), &options)?.latency);
    }
    Ok(BenchReport {
        frames: n,
        parallel: crate::par::is_parallel(),
        inference_ms: StageStats::from_samples(lat.iter().map(|l| l.inference_ms).collect()),
        render_ms: StageStats::from_samples(lat.iter().map(|l| l.render_ms).collect()),
        total_ms: StageStats::from_samples(lat.iter().map(|l| l.total_ms).collect()),
        training_ms: training_ms.or(session.last_report().map(|r| r.training_ms)),
    })
}

/// Seeded stand-in for a webcam: a noisy background with a coloured square
/// that drifts across the frame.
#[derive(Debug, Clone)]
pub struct SyntheticFrames {
    seed: u64,
    width: usize,
    height: usize,
}

impl SyntheticFrames {
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        Self { seed, width, height }
    }

    pub fn vga(seed: u64) -> Self {
        Self::new(seed, 640, 480)
    }

    pub fn frame(&self, index: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let (w, h) = (self.width, self.height);
        let colour: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let side = (w.min(h) / 3).max(1);
        let x0 = (index * 7) % (w - side + 1);
        let y0 = (index * 5) % (h - side + 1);
        let mut px = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 3;
                if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
                    px[i..i + 3].copy_from_slice(&colour);
                } else {
                    let n: u8 = rng.gen_range(40..90);
                    px[i..i + 3].copy_from_slice(&[n, n, n]);
                }
            }
        }
        Frame::new(w, h, px, index as u64).expect("buffer sized to match")
    }
}

//! `salient-teach` subcommands.
//!
//! Every command writes JSON lines to `out` and human-readable warnings to
//! `warn`; errors are returned to the caller, which exits nonzero.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use salient_teach_core::eval::{EvalOptions, StageStats, SyntheticFrames};
use salient_teach_core::saliency::RenderOptions;
use salient_teach_core::{
    bench, create_session, evaluate_frame, load_backbone, par, train, Backbone, FeatureTensor, Frame, TeachingSession,
    TrainConfig, TrainReport,
};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "salient-teach", version, about = "Teach, evaluate and benchmark saliency-explained classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// ONNX model path or `test:<seed>:<K>:<h>:<w>`.
    #[arg(long, global = true)]
    pub backbone: Option<String>,
    /// Seed for batch shuffling (teach) or synthetic frames (bench).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Train a session from one subdirectory of images per label.
    Teach {
        data_dir: PathBuf,
        /// Where to write the session file.
        #[arg(long)]
        out: PathBuf,
        /// Label names, one per line, in id order. Defaults to the sorted
        /// subdirectory names.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score one image and optionally write its saliency overlay.
    Eval {
        session: PathBuf,
        image: PathBuf,
        /// Label whose saliency to show instead of the top-scoring one.
        #[arg(long = "class")]
        class: Option<String>,
        /// Write the image with the overlay composited onto its crop square.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Clip negative CAM values to zero before normalizing.
        #[arg(long)]
        clip_negative: bool,
    },
    /// Time the evaluation pipeline over many frames.
    Bench {
        session: PathBuf,
        #[arg(short = 'n', default_value_t = 100)]
        n: usize,
        /// Cycle through the images in this directory instead of synthetic
        /// 640x480 frames.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

impl Common {
    pub fn backbone(&self) -> Result<Backbone> {
        let src = self.backbone.as_deref().ok_or_else(|| anyhow!("--backbone is required"))?;
        load_backbone(src).with_context(|| format!("loading backbone {src}"))
    }

    pub fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            ..d
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write, warn: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Teach { data_dir, out: path, labels } => {
            cmd_teach(c, data_dir, path, labels.as_deref(), out, warn).map(drop)
        }
        Command::Eval { session, image, class, overlay, clip_negative } => {
            let opts = EvalArgs { class: class.clone(), overlay: overlay.clone(), clip_negative: *clip_negative };
            cmd_eval(c, session, image, &opts, out).map(drop)
        }
        Command::Bench { session, n, frames } => cmd_bench(c, session, *n, frames.as_deref(), out, warn).map(drop),
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if entry.file_type()?.is_dir() == want_dirs {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

fn read_frame(path: &Path) -> salient_teach_core::Result<Frame> {
    let bytes = fs::read(path)?;
    Frame::decode(&bytes, 0)
}

fn label_names(data_dir: &Path, labels_file: Option<&Path>) -> Result<Vec<String>> {
    let names: Vec<String> = match labels_file {
        Some(file) => fs::read_to_string(file)
            .with_context(|| format!("reading {}", file.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => sorted_entries(data_dir, true)?
            .iter()
            .map(|p| p.file_name().expect("directory entry has a name").to_string_lossy().into_owned())
            .collect(),
    };
    ensure!(
        names.len() >= 2,
        "need at least 2 labels, found {} in {}",
        names.len(),
        data_dir.display()
    );
    Ok(names)
}

#[derive(Debug)]
pub struct TeachOutcome {
    pub session: TeachingSession,
    pub report: TrainReport,
}

/// Teaches a session from `data_dir/<label>/*` and saves it to `out_path`.
///
/// Images are decoded and featurized in parallel, but samples enter the
/// session in sorted file order so training is reproducible.
pub fn cmd_teach(
    common: &Common,
    data_dir: &Path,
    out_path: &Path,
    labels_file: Option<&Path>,
    out: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<TeachOutcome> {
    let backbone = common.backbone()?;
    let names = label_names(data_dir, labels_file)?;
    let mut session = create_session(&backbone, common.config(), common.seed)?;
    let mut jobs = Vec::new();
    for name in &names {
        let id = session.add_label(name)?;
        let dir = data_dir.join(name);
        ensure!(dir.is_dir(), "label {name:?} has no directory {}", dir.display());
        jobs.extend(sorted_entries(&dir, false)?.into_iter().map(|p| (id, p)));
    }

    let features: Vec<salient_teach_core::Result<FeatureTensor>> =
        par::map_slice(&jobs, |(_, path)| read_frame(path).and_then(|f| backbone.features_for(&f)));
    for ((id, path), result) in jobs.iter().zip(features) {
        match result {
            Ok(f) => {
                session.add_features(*id, f)?;
            }
            Err(e) => writeln!(warn, "warning: skipping {}: {e}", path.display())?,
        }
    }
    for (label, count) in session.labels().iter().zip(session.counts()) {
        ensure!(count > 0, "label {:?} has no readable images", label.name);
    }

    let mut io_err = None;
    let report = session.train(
        |p| {
            let line = json!({"type": "train_progress", "epoch": p.epoch, "epochs": p.epochs, "loss": p.mean_loss});
            if let Err(e) = emit(out, &line) {
                io_err.get_or_insert(e);
            }
        },
        None,
    )?;
    if let Some(e) = io_err {
        return Err(e);
    }
    session.save(out_path).with_context(|| format!("writing {}", out_path.display()))?;
    let labels: Vec<_> = session
        .labels()
        .iter()
        .zip(session.counts())
        .map(|(l, count)| json!({"id": l.id, "name": l.name, "count": count}))
        .collect();
    emit(out, &json!({"type": "trained", "session": out_path, "labels": labels, "report": report}))?;
    Ok(TeachOutcome { session, report })
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub class: Option<String>,
    pub overlay: Option<PathBuf>,
    pub clip_negative: bool,
}

fn load_session(path: &Path, backbone: &Backbone) -> Result<TeachingSession> {
    TeachingSession::load(path, backbone).with_context(|| format!("loading session {}", path.display()))
}

/// Scores `image_path`; prints `{scores, saliency_class, latency, ...}`.
pub fn cmd_eval(
    common: &Common,
    session_path: &Path,
    image_path: &Path,
    args: &EvalArgs,
    out: &mut dyn Write,
) -> Result<serde_json::Value> {
    let backbone = common.backbone()?;
    let session = load_session(session_path, &backbone)?;
    let selected_class = match &args.class {
        None => None,
        Some(name) => Some(session.label_id(name).ok_or_else(|| {
            let valid: Vec<&str> = session.labels().iter().map(|l| l.name.as_str()).collect();
            anyhow!("unknown class {name:?}; valid labels: {}", valid.join(", "))
        })?),
    };
    let frame = read_frame(image_path).with_context(|| format!("reading {}", image_path.display()))?;
    let options = EvalOptions {
        selected_class,
        render_overlay: true,
        render: RenderOptions { clip_negative: args.clip_negative },
    };
    let result = evaluate_frame(&session, &backbone, &frame, &options)?;

    if let Some(path) = &args.overlay {
        let overlay = result.overlay.as_ref().expect("overlay was requested");
        let crop = frame.crop_region();
        let mut image = frame.to_rgb_image();
        overlay.composite_onto(&mut image, crop.x as u32, crop.y as u32);
        image
            .save_with_format(path, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let line = json!({
        "scores": result.scores,
        "saliency_class": result.saliency_class,
        "saliency_label": session.labels()[result.saliency_class].name,
        "crop": frame.crop_region(),
        "latency": result.latency,
        "overlay": args.overlay,
    });
    emit(out, &line)?;
    Ok(line)
}

fn stats(s: &StageStats) -> serde_json::Value {
    json!({"mean": s.mean, "median": s.median, "p95": s.p95})
}

/// Runs the latency benchmark. Training time is measured by retraining the
/// head from the stored samples, which reproduces the saved head exactly.
pub fn cmd_bench(
    common: &Common,
    session_path: &Path,
    n: usize,
    frames_dir: Option<&Path>,
    out: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<serde_json::Value> {
    ensure!(n > 0, "-n must be at least 1");
    let backbone = common.backbone()?;
    let session = load_session(session_path, &backbone)?;
    session.active_head()?;

    let examples = session.training_examples();
    let (head, report) = train(session.labels().len(), &examples, session.config(), session.seed(), |_| {}, None)?;
    let retrained_matches = session.head() == Some(&head);

    let source: Box<dyn Fn(usize) -> Frame> = match frames_dir {
        None => {
            let synth = SyntheticFrames::vga(common.seed);
            Box::new(move |i| synth.frame(i))
        }
        Some(dir) => {
            let mut frames = Vec::new();
            for path in sorted_entries(dir, false)? {
                match read_frame(&path) {
                    Ok(f) => frames.push(f),
                    Err(e) => writeln!(warn, "warning: skipping {}: {e}", path.display())?,
                }
            }
            if frames.is_empty() {
                bail!("no readable images in {}", dir.display());
            }
            Box::new(move |i| frames[i % frames.len()].clone())
        }
    };
    let r = bench(&session, &backbone, n, source, Some(report.training_ms))?;
    for i in 0..n {
        emit(
            out,
            &json!({
                "type": "frame",
                "index": i,
                "inference_ms": r.inference_ms.samples[i],
                "render_ms": r.render_ms.samples[i],
                "total_ms": r.total_ms.samples[i],
            }),
        )?;
    }
    let summary = json!({
        "type": "bench",
        "frames": r.frames,
        "parallel": r.parallel,
        "inference_ms": stats(&r.inference_ms),
        "render_ms": stats(&r.render_ms),
        "total_ms": stats(&r.total_ms),
        "training_ms": r.training_ms,
        "retrained_head_matches": retrained_matches,
    });
    emit(out, &summary)?;
    Ok(summary)
}

//! Acceptance criteria for the teaching engine, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so every criterion reports
//! even when an earlier one fails. Exits nonzero if any criterion fails.

use std::fs;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use futures_util::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salient_teach_cli::{cmd_bench, cmd_teach, Common};
use salient_teach_core::saliency::{render_overlay, select_saliency_class, Colormap, SaliencyGrid, ALPHA_MAX};
use salient_teach_core::tensor::logits_gradient;
use salient_teach_core::trainer::{accuracy, batch_gradient, Example};
use salient_teach_core::{
    adam_step, argmax_class, bilinear_resize, compute_cam, cross_entropy, forward, load_backbone, minmax_normalize,
    softmax, train, AdamState, FeatureShape, FeatureTensor, Grid2D, LinearHead, Logits, Probabilities, TrainConfig,
};
use serde_json::{json, Value};
use tokio::runtime::Runtime;
use tokio_tungstenite::tungstenite::Message;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        // NaN must fail, so the condition is negated as a whole.
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_instance(rng: &mut ChaCha8Rng, max_hw: usize, max_k: usize, max_c: usize) -> (FeatureTensor, LinearHead) {
    let shape = FeatureShape { h: rng.gen_range(1..=max_hw), w: rng.gen_range(1..=max_hw), k: rng.gen_range(1..=max_k) };
    let maps = (0..shape.len()).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
    let features = FeatureTensor::from_maps(shape, maps).unwrap();
    let c = rng.gen_range(2..=max_c);
    let weights = (0..c * shape.k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let bias = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (features, LinearHead::new(c, shape.k, weights, bias).unwrap())
}

fn cam_gap_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (features, head) = random_instance(&mut rng, 8, 32, 5);
        let z = forward(&head, features.gap()).unwrap();
        for c in 0..head.classes() {
            let cam = compute_cam(&features, &head, c).unwrap();
            let zc = z.values()[c];
            let err = (cam.grid.mean() - (zc - head.bias()[c])).abs() / (1.0 + zc.abs());
            worst = worst.max(err);
            check!(err <= 1e-9, "class {c}: scaled error {err:e}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("1000 instances, worst scaled error {worst:.1e}, {secs:.2} s"))
}

fn cam_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0usize;
    for i in 0..600 {
        let (features, head) = if i == 0 {
            let shape = FeatureShape { h: 8, w: 8, k: 16 };
            let maps = (0..shape.len()).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
            let w = (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (FeatureTensor::from_maps(shape, maps).unwrap(), LinearHead::new(3, 16, w, vec![0.5; 3]).unwrap())
        } else {
            random_instance(&mut rng, 8, 16, 5)
        };
        let s = features.shape();
        for c in 0..head.classes() {
            let cam = compute_cam(&features, &head, c).unwrap().grid;
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = 0.0f64;
                    for k in 0..s.k {
                        acc += head.weights()[c * s.k + k] * features.maps()[(k * s.h + y) * s.w + x] as f64;
                    }
                    check!(cam.get(y, x).to_bits() == acc.to_bits(), "instance {i} class {c} cell ({y},{x})");
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("600 instances up to 8x8x16, {compared} cells bitwise equal"))
}

/// Mean softmax cross-entropy of a batch, written out independently.
fn oracle_loss(c: usize, k: usize, params: &[f64], data: &[(Vec<f64>, usize)]) -> f64 {
    let (w, b) = params.split_at(c * k);
    let mut total = 0.0;
    for (g, label) in data {
        let z: Vec<f64> = (0..c).map(|i| b[i] + (0..k).map(|j| w[i * k + j] * g[j]).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[*label];
    }
    total / data.len() as f64
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let (c, k, n) = (rng.gen_range(2..=4), rng.gen_range(1..=6), rng.gen_range(1..=8));
        let data: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| ((0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(), rng.gen_range(0..c)))
            .collect();
        let mut params: Vec<f64> = (0..c * k + c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let head = LinearHead::new(c, k, params[..c * k].to_vec(), params[c * k..].to_vec()).unwrap();
        let batch: Vec<Example<'_>> = data.iter().map(|(g, l)| Example { features: g, label: *l }).collect();
        let (_, analytic) = batch_gradient(&head, &batch).unwrap();
        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + step;
            let up = oracle_loss(c, k, &params, &data);
            params[i] = orig - step;
            let down = oracle_loss(c, k, &params, &data);
            params[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
        check!(rel <= 1e-6, "instance {inst} (C={c}, K={k}, n={n}): relative error {rel:e}");
    }
    Ok(format!("200 instances (C<=4, K<=6, n<=8), worst relative error {worst:.1e}"))
}

fn separable_features(seed: u64, classes: usize, per_class: usize, k: usize) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = k / classes;
    let mut data = Vec::new();
    for label in 0..classes {
        for _ in 0..per_class {
            let g = (0..k)
                .map(|j| {
                    let centre = if j / block == label { 1.5 } else { 0.2 };
                    centre + rng.gen_range(-0.3..0.3)
                })
                .collect();
            data.push((g, label));
        }
    }
    data
}

/// Full-batch gradient descent on softmax regression, separate from the
/// crate's trainer.
fn convex_oracle_accuracy(classes: usize, data: &[(Vec<f64>, usize)]) -> f64 {
    let k = data[0].0.len();
    let mut params = vec![0.0; classes * k + classes];
    for _ in 0..3000 {
        let mut grad = vec![0.0; params.len()];
        for (g, label) in data {
            let z: Vec<f64> = (0..classes)
                .map(|i| params[classes * k + i] + (0..k).map(|j| params[i * k + j] * g[j]).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for i in 0..classes {
                let d = e[i] / s - if i == *label { 1.0 } else { 0.0 };
                for j in 0..k {
                    grad[i * k + j] += d * g[j] / data.len() as f64;
                }
                grad[classes * k + i] += d / data.len() as f64;
            }
        }
        params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= 0.5 * g);
    }
    let correct = data
        .iter()
        .filter(|(g, label)| {
            let z: Vec<f64> = (0..classes)
                .map(|i| params[classes * k + i] + (0..k).map(|j| params[i * k + j] * g[j]).sum::<f64>())
                .collect();
            argmax_class(&z).unwrap() == *label
        })
        .count();
    correct as f64 / data.len() as f64
}

fn training_convergence() -> Outcome {
    let data = separable_features(4, 3, 30, 24);
    let examples: Vec<Example<'_>> = data.iter().map(|(g, l)| Example { features: g, label: *l }).collect();
    let config = TrainConfig::default();
    check!(config.epochs == 10 && config.batch_size == 32, "defaults changed: {config:?}");
    let (head, report) = train(3, &examples, &config, 7, |_| {}, None).map_err(|e| e.to_string())?;
    let acc = accuracy(&head, &examples);
    let losses = &report.epoch_losses;
    check!(losses.len() == 10, "{} epoch losses", losses.len());
    check!(acc == 1.0, "train accuracy {acc}");
    check!(losses[9] < losses[0], "epoch-10 loss {} not below epoch-1 loss {}", losses[9], losses[0]);
    let oracle = convex_oracle_accuracy(3, &data);
    check!(oracle >= acc, "convex oracle reached only {oracle}");
    Ok(format!(
        "3x30 samples: accuracy {acc}, loss {:.4} -> {:.4}, oracle accuracy {oracle}",
        losses[0], losses[9]
    ))
}

const PALETTE: [[u8; 3]; 3] = [[210, 40, 40], [40, 190, 60], [50, 60, 210]];

/// Writes `per_label` noisy PNGs of a base colour into one directory per label.
fn write_corpus(root: &Path, per_label: usize, seed: u64) -> Vec<(String, Vec<PathBuf>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, base) in ["apple", "leaf", "sky"].into_iter().zip(PALETTE) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        let mut files = Vec::new();
        for i in 0..per_label {
            let img = image::RgbImage::from_fn(80, 60, |_, _| {
                image::Rgb(base.map(|v| (v as i32 + rng.gen_range(-25..=25)).clamp(0, 255) as u8))
            });
            let path = dir.join(format!("img_{i:03}.png"));
            img.save(&path).unwrap();
            files.push(path);
        }
        out.push((name.to_string(), files));
    }
    out
}

fn common(backbone: &str, seed: u64) -> Common {
    Common { backbone: Some(backbone.into()), seed, ..Default::default() }
}

const BACKBONE: &str = "test:42:64:7:7";

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_corpus(&data, 30, 5);
    let mut files = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.json"));
        let (mut stdout, mut warn) = (Vec::new(), Vec::new());
        let outcome = cmd_teach(&common(BACKBONE, 11), &data, &out, None, &mut stdout, &mut warn)
            .map_err(|e| format!("{e:#}"))?;
        check!(outcome.session.counts() == vec![30, 30, 30], "counts {:?}", outcome.session.counts());
        files.push(fs::read(&out).unwrap());
    }
    check!(files[0] == files[1], "session files differ");
    Ok(format!("two teach runs wrote identical {}-byte session files", files[0].len()))
}

fn start_server(rt: &Runtime, max_sessions: usize) -> SocketAddr {
    rt.block_on(async {
        let backbone = Arc::new(load_backbone(BACKBONE).unwrap());
        let config = salient_teach_server::ServerConfig { max_sessions, ui_dir: None };
        let (addr, server) = salient_teach_server::bind("127.0.0.1:0".parse().unwrap(), backbone, &config)
            .await
            .unwrap();
        tokio::spawn(server);
        addr
    })
}

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(addr: SocketAddr) -> Client {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn recv(c: &mut Client) -> Result<Value, String> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), c.next())
            .await
            .map_err(|_| "no reply within 30 s".to_string())?
            .ok_or("connection closed")?
            .map_err(|e| e.to_string())?;
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).map_err(|e| e.to_string());
        }
    }
}

async fn call(c: &mut Client, v: Value) -> Result<Value, String> {
    c.send(Message::text(v.to_string())).await.map_err(|e| e.to_string())?;
    recv(c).await
}

fn head_fields(session_json: &str) -> (Value, Value) {
    let v: Value = serde_json::from_str(session_json).unwrap();
    (v["head"]["weights"].clone(), v["head"]["bias"].clone())
}

fn cli_service_equivalence(rt: &Runtime) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let corpus = write_corpus(&data, 10, 6);
    let seed = 23;
    let out = dir.path().join("cli.json");
    cmd_teach(&common(BACKBONE, seed), &data, &out, None, &mut Vec::new(), &mut Vec::new())
        .map_err(|e| format!("{e:#}"))?;
    let cli_json = fs::read_to_string(&out).unwrap();

    let addr = start_server(rt, 4);
    let service_json = rt.block_on(async {
        let mut c = connect(addr).await;
        let r = call(&mut c, json!({"type": "create_session", "seed": seed})).await?;
        check!(r["type"] == "session_created", "{r}");
        for (name, files) in &corpus {
            let r = call(&mut c, json!({"type": "add_label", "name": name})).await?;
            let id = r["label_id"].clone();
            for f in files {
                let r = call(&mut c, json!({"type": "add_sample", "label_id": id, "frame": B64.encode(fs::read(f).unwrap())}))
                    .await?;
                check!(r["type"] == "sample_added", "{r}");
            }
        }
        c.send(Message::text(json!({"type": "train"}).to_string())).await.map_err(|e| e.to_string())?;
        loop {
            let r = recv(&mut c).await?;
            match r["type"].as_str() {
                Some("train_progress") => continue,
                Some("trained") => break,
                _ => return Err(format!("unexpected {r}")),
            }
        }
        let saved = call(&mut c, json!({"type": "save"})).await?;
        let blob = B64.decode(saved["blob"].as_str().ok_or("no blob")?).map_err(|e| e.to_string())?;
        String::from_utf8(blob).map_err(|e| e.to_string())
    })?;

    check!(head_fields(&cli_json) == head_fields(&service_json), "head weights differ");
    let whole = if cli_json == service_json { "; whole session files identical" } else { "" };
    Ok(format!("3x10 corpus: head weights and bias bitwise equal{whole}"))
}

fn latency_structure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_corpus(&data, 10, 8);
    let backbone = "test:42:1024:7:7";
    let session = dir.path().join("s.json");
    cmd_teach(&common(backbone, 1), &data, &session, None, &mut Vec::new(), &mut Vec::new())
        .map_err(|e| format!("{e:#}"))?;
    let mut out = Vec::new();
    let summary =
        cmd_bench(&common(backbone, 1), &session, 100, None, &mut out, &mut Vec::new()).map_err(|e| format!("{e:#}"))?;
    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let frames: Vec<&Value> = lines.iter().filter(|l| l["type"] == "frame").collect();
    check!(frames.len() == 100, "{} frame lines", frames.len());
    for f in &frames {
        let get = |k: &str| f[k].as_f64().unwrap();
        check!(
            get("inference_ms") + get("render_ms") <= get("total_ms") + 1.0,
            "frame {}: stages exceed total",
            f["index"]
        );
    }
    let p95 = summary["total_ms"]["p95"].as_f64().unwrap();
    check!(p95 < 200.0, "total p95 {p95:.1} ms");
    Ok(format!(
        "100 VGA frames on a 7x7x1024 test backbone: total mean {:.1} ms, p95 {p95:.1} ms; training {:.1} ms",
        summary["total_ms"]["mean"].as_f64().unwrap(),
        summary["training_ms"].as_f64().unwrap_or(f64::NAN)
    ))
}

/// Messages that must each be rejected with exactly one error.
fn fuzz_corpus(n: usize, seed: u64) -> Vec<Message> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid = [
        json!({"type": "create_session", "seed": 3}),
        json!({"type": "add_label", "name": "cat"}),
        json!({"type": "add_sample", "label_id": 0, "frame": "iVBORw0KGgo="}),
        json!({"type": "clear_label", "label_id": 1}),
        json!({"type": "train"}),
        json!({"type": "frame", "frame": "iVBORw0KGgo=", "selected_class": 1}),
        json!({"type": "select_class", "class_id": null}),
        json!({"type": "reopen"}),
        json!({"type": "save"}),
        json!({"type": "load", "blob": "e30="}),
    ];
    let types = ["create_session", "add_label", "add_sample", "clear_label", "train", "frame", "select_class", "reopen", "save", "load"];
    let junk = |rng: &mut ChaCha8Rng| -> Value {
        match rng.gen_range(0..6) {
            0 => json!(null),
            1 => json!(rng.gen::<bool>()),
            2 => json!(rng.gen_range(-1e6..1e6)),
            3 => json!([1, "two", null]),
            4 => json!({"nested": {"x": 1}}),
            _ => json!(-rng.gen_range(1..1000)),
        }
    };
    (0..n)
        .map(|_| match rng.gen_range(0..14) {
            0 => {
                let len = rng.gen_range(0..64);
                Message::binary((0..len).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>())
            }
            1 => {
                let len = rng.gen_range(0..48);
                Message::text((0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect::<String>())
            }
            2 => {
                let s = valid[rng.gen_range(0..valid.len())].to_string();
                Message::text(s[..rng.gen_range(0..s.len())].to_string())
            }
            3 => Message::text(json!({"type": format!("cmd_{}", rng.gen::<u32>())}).to_string()),
            4 => {
                let mut v = valid[rng.gen_range(0..valid.len())].clone();
                v[format!("extra_{}", rng.gen::<u16>())] = json!(1);
                Message::text(v.to_string())
            }
            5 => {
                let (ty, field) = [
                    ("add_label", "name"),
                    ("add_sample", "label_id"),
                    ("add_sample", "frame"),
                    ("clear_label", "label_id"),
                    ("frame", "frame"),
                    ("load", "blob"),
                ][rng.gen_range(0..6)];
                let mut v = valid.iter().find(|v| v["type"] == ty).unwrap().clone();
                v[field] = loop {
                    let j = junk(&mut rng);
                    if !(field == "label_id" && j.as_u64().is_some()) {
                        break j;
                    }
                };
                Message::text(v.to_string())
            }
            6 => {
                let mut v = valid[rng.gen_range(0..valid.len())].clone();
                v.as_object_mut().unwrap().remove("type");
                Message::text(v.to_string())
            }
            7 => Message::text(
                [json!(1), json!("text"), json!(null), json!([]), json!(true), json!({})][rng.gen_range(0..6)]
                    .to_string(),
            ),
            8 => {
                let depth = rng.gen_range(200..2000);
                Message::text("[".repeat(depth) + &"]".repeat(depth))
            }
            9 => {
                let mut bytes = valid[rng.gen_range(0..valid.len())].to_string().into_bytes();
                let at = rng.gen_range(0..bytes.len());
                bytes.insert(at, [0xff, 0xc0, 0x80][rng.gen_range(0..3)]);
                Message::binary(bytes)
            }
            10 => Message::text(
                match rng.gen_range(0..4) {
                    0 => json!({"type": "add_sample", "label_id": rng.gen_range(2..10_000), "frame": "iVBORw0KGgo="}),
                    1 => json!({"type": "clear_label", "label_id": rng.gen_range(2..10_000)}),
                    2 => json!({"type": "select_class", "class_id": rng.gen_range(2..10_000)}),
                    _ => json!({"type": "frame", "frame": "iVBORw0KGgo="}),
                }
                .to_string(),
            ),
            11 => {
                let payload: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect();
                let frame = if rng.gen() { B64.encode(payload) } else { "@@not base64@@".into() };
                Message::text(json!({"type": "add_sample", "label_id": 0, "frame": frame}).to_string())
            }
            12 => Message::text(
                match rng.gen_range(0..4) {
                    0 => json!({"type": "create_session", "config": {"epochs": 0}}),
                    1 => json!({"type": "create_session", "config": {"learning_rate": -1.0}}),
                    2 => json!({"type": "create_session", "config": {"momentum": 0.9}}),
                    _ => json!({"type": "load", "blob": B64.encode(format!("{{\"version\":{}}}", rng.gen::<u8>()))}),
                }
                .to_string(),
            ),
            _ => Message::text(
                json!({"type": types[rng.gen_range(0..types.len())].to_uppercase()}).to_string(),
            ),
        })
        .collect()
}

fn protocol_fuzz(rt: &Runtime) -> Outcome {
    let addr = start_server(rt, 4);
    let corpus = fuzz_corpus(10_000, 9);
    rt.block_on(async {
        let mut c = connect(addr).await;
        call(&mut c, json!({"type": "create_session", "seed": 1})).await?;
        call(&mut c, json!({"type": "add_label", "name": "first"})).await?;
        call(&mut c, json!({"type": "add_label", "name": "second"})).await?;
        for (i, m) in corpus.into_iter().enumerate() {
            let shown = format!("{m:?}").chars().take(120).collect::<String>();
            c.send(m).await.map_err(|e| format!("message {i}: send failed: {e}"))?;
            let r = recv(&mut c).await.map_err(|e| format!("message {i} ({shown}): {e}"))?;
            check!(r["type"] == "error", "message {i} ({shown}) was accepted: {r}");
        }
        let r = call(&mut c, json!({"type": "add_label", "name": "sentinel"})).await?;
        check!(r["type"] == "label_added" && r["label_id"] == 2, "extra replies detected: {r}");
        let mut fresh = connect(addr).await;
        let r = call(&mut fresh, json!({"type": "create_session"})).await?;
        check!(r["type"] == "session_created", "server unusable after fuzzing: {r}");
        Ok("10000 malformed messages, one error each; server still serving".to_string())
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn numeric_kernels() -> Outcome {
    let sm = |v: &[f64]| softmax(&Logits::new(v.to_vec()).unwrap()).values().to_vec();
    let p = sm(&[0.0, 0.0, 0.0]);
    check!(p.iter().all(|v| close(*v, 1.0 / 3.0, 1e-15)), "softmax(0,0,0) = {p:?}");
    check!(sm(&[4.2]) == [1.0], "softmax single class");
    let p = sm(&[1.0, 2.0, 3.0]);
    for (a, b) in p.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        check!(close(*a, b, 1e-7), "softmax(1,2,3) = {p:?}");
    }

    let probs = |v: &[f64]| Probabilities::new(v.to_vec()).unwrap();
    check!(cross_entropy(&probs(&[0.0, 1.0]), 1).unwrap() == 0.0, "CE of a perfect prediction");
    for label in 0..3 {
        let ce = cross_entropy(&probs(&[1.0 / 3.0; 3]), label).unwrap();
        check!(close(ce, 3f64.ln(), 1e-12), "CE uniform = {ce}");
    }
    let ce = cross_entropy(&probs(&[0.7, 0.2, 0.1]), 1).unwrap();
    check!(close(ce, 1.6094379, 1e-7), "CE (0.7,0.2,0.1)/1 = {ce}");
    check!(cross_entropy(&probs(&[0.5, 0.5]), 2).is_err(), "CE label out of range");

    check!(logits_gradient(&probs(&[0.0, 1.0, 0.0]), 1).unwrap() == [0.0; 3], "gradient at one-hot");
    let g = logits_gradient(&probs(&[1.0 / 3.0; 3]), 0).unwrap();
    for (a, b) in g.iter().zip([-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]) {
        check!(close(*a, b, 1e-15), "gradient uniform = {g:?}");
    }
    let g = logits_gradient(&probs(&[0.09003057, 0.24472847, 0.66524096]), 2).unwrap();
    for (a, b) in g.iter().zip([0.09003057, 0.24472847, -0.33475904]) {
        check!(close(*a, b, 1e-7), "gradient (1,2,3)/2 = {g:?}");
    }

    let head = LinearHead::new(1, 2, vec![0.5, -1.0], vec![0.25]).unwrap();
    let z = forward(&head, &[2.5, 0.5]).unwrap();
    check!(z.values() == [1.0], "forward = {:?}", z.values());

    let config = TrainConfig::default();
    let mut theta = vec![0.3, -0.7];
    let mut st = AdamState::new(2);
    adam_step(&mut theta, &[0.0, 0.0], &mut st, &config).unwrap();
    check!(theta == [0.3, -0.7], "zero gradient moved parameters: {theta:?}");
    let (mut theta, mut st) = (vec![0.0], AdamState::new(1));
    adam_step(&mut theta, &[1.0], &mut st, &config).unwrap();
    check!(close(theta[0], -0.001 / (1.0 + 1e-8), 1e-18), "one Adam step = {}", theta[0]);
    check!(close(theta[0], -0.000999999990, 1e-12), "one Adam step = {}", theta[0]);
    adam_step(&mut theta, &[1.0], &mut st, &config).unwrap();
    check!(close(theta[0], -0.002, 1e-6), "two Adam steps = {}", theta[0]);
    check!(adam_step(&mut theta, &[1.0, 2.0], &mut st, &config).is_err(), "Adam shape mismatch");

    let five = Grid2D::filled(3, 2, 5.0).unwrap();
    let up = bilinear_resize(&five, 7, 11).unwrap();
    check!(up.values().iter().all(|v| *v == 5.0), "constant grid resize");
    let g = Grid2D::from_rows(&[&[0.1, 0.9, 0.4], &[0.3, 0.2, 0.8]]).unwrap();
    let same = bilinear_resize(&g, 2, 3).unwrap();
    for (a, b) in same.values().iter().zip(g.values()) {
        check!(close(*a, *b, 1e-12), "identity resize");
    }
    let up = bilinear_resize(&Grid2D::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap(), 4, 4).unwrap();
    for y in 0..4 {
        for (x, want) in [0.0, 0.25, 0.75, 1.0].into_iter().enumerate() {
            check!(close(up.get(y, x), want, 1e-12), "2x2 -> 4x4 at ({y},{x}) = {}", up.get(y, x));
        }
    }

    let n = minmax_normalize(&Grid2D::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]).unwrap());
    for (a, b) in n.values().iter().zip([0.0, 2.0 / 3.0, 1.0 / 3.0, 1.0]) {
        check!(close(*a, b, 1e-15), "minmax [[1,3],[2,4]] = {:?}", n.values());
    }
    check!(minmax_normalize(&five).values().iter().all(|v| *v == 0.0), "constant grid normalizes to zeros");
    let unit = Grid2D::from_rows(&[&[0.0, 0.25], &[1.0, 0.5]]).unwrap();
    check!(minmax_normalize(&unit) == unit, "normalized grid changed");

    check!(argmax_class(&[0.2, 0.5, 0.3]).unwrap() == 1, "argmax");
    check!(argmax_class(&[0.5, 0.5]).unwrap() == 0, "argmax tie-break");
    check!(argmax_class(&[1.0]).unwrap() == 0, "argmax single");
    check!(argmax_class(&[]).is_err(), "argmax empty");

    check!(select_saliency_class(&probs(&[0.1, 0.7, 0.2]), None).unwrap() == 1, "default saliency class");
    check!(select_saliency_class(&probs(&[0.1, 0.7, 0.2]), Some(0)).unwrap() == 0, "chosen saliency class");
    check!(select_saliency_class(&probs(&[0.1, 0.7, 0.2]), Some(5)).is_err(), "out-of-range saliency class");

    let flat = render_overlay(&SaliencyGrid { class_id: 0, grid: Grid2D::filled(7, 7, 0.3).unwrap() }, 32).unwrap();
    check!(flat.pixels().iter().all(|p| p.alpha == 0.0), "constant CAM overlay not transparent");
    let peak = Grid2D::from_rows(&[&[0.0, 0.0], &[0.0, 2.0]]).unwrap();
    let ov = render_overlay(&SaliencyGrid { class_id: 0, grid: peak }, 4).unwrap();
    let last = *Colormap::shipped().entries().last().unwrap();
    check!(ov.at(3, 3).rgb == last && ov.at(3, 3).alpha == ALPHA_MAX, "peak pixel {:?}", ov.at(3, 3));

    Ok("softmax, cross-entropy, gradient, forward, Adam, bilinear, min-max, argmax and overlay examples".into())
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let criteria: Vec<Criterion<'_>> = vec![
        ("cam_gap_identity", Box::new(cam_gap_identity)),
        ("cam_brute_force_equivalence", Box::new(cam_brute_force)),
        ("gradient_correctness", Box::new(gradient_check)),
        ("training_convergence", Box::new(training_convergence)),
        ("teach_determinism", Box::new(determinism)),
        ("cli_service_equivalence", Box::new(|| cli_service_equivalence(&rt))),
        ("latency_structure", Box::new(latency_structure)),
        ("protocol_fuzz", Box::new(|| protocol_fuzz(&rt))),
        ("numeric_kernels", Box::new(numeric_kernels)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(msg.unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2} s): {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! WebSocket front end for teaching sessions.
//!
//! Every connection on `/ws` owns one [`Connection`] and handles its messages
//! strictly in arrival order. Training runs on the blocking pool so other
//! connections keep going; while it runs, the connection streams progress
//! and rejects further commands with `wrong_state`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::stream::{SplitSink, SplitStream};
use futures_util::{SinkExt, StreamExt};
use salient_teach_core::protocol::{ClientMessage, Connection, Dispatch, ServerMessage, TrainJob};
use salient_teach_core::{Backbone, Error};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Semaphore};
use tower_http::services::ServeDir;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_sessions: usize,
    /// Static client bundle served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_sessions: 8, ui_dir: None }
    }
}

#[derive(Clone)]
struct AppState {
    backbone: Arc<Backbone>,
    slots: Arc<Semaphore>,
}

pub fn router(backbone: Arc<Backbone>, config: &ServerConfig) -> Router {
    let state = AppState { backbone, slots: Arc::new(Semaphore::new(config.max_sessions)) };
    let app = Router::new().route("/ws", get(upgrade)).with_state(state);
    match &config.ui_dir {
        Some(dir) => app.nest_service("/ui", ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` and returns the bound address with a future that serves
/// until the process ends.
pub async fn bind(
    addr: SocketAddr,
    backbone: Arc<Backbone>,
    config: &ServerConfig,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(backbone, config);
    Ok((local, async move { axum::serve(listener, app).await }))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| serve_socket(socket, state))
}

type Sink = SplitSink<WebSocket, Message>;

async fn send(sink: &mut Sink, messages: Vec<ServerMessage>) -> bool {
    for m in messages {
        if sink.send(Message::Text(m.to_json().into())).await.is_err() {
            return false;
        }
    }
    true
}

enum Inbound {
    Text(String),
    Bytes(Vec<u8>),
    Skip,
    Closed,
}

fn classify(item: Option<Result<Message, axum::Error>>) -> Inbound {
    match item {
        Some(Ok(Message::Text(t))) => Inbound::Text(t.to_string()),
        Some(Ok(Message::Binary(b))) => Inbound::Bytes(b.to_vec()),
        Some(Ok(Message::Ping(_) | Message::Pong(_))) => Inbound::Skip,
        Some(Ok(Message::Close(_))) | Some(Err(_)) | None => Inbound::Closed,
    }
}

async fn serve_socket(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let Ok(_permit) = state.slots.clone().try_acquire_owned() else {
        tracing::warn!("rejecting connection: session limit reached");
        let full = ServerMessage::Error { code: "capacity".into(), detail: "session limit reached".into() };
        let _ = send(&mut sink, vec![full]).await;
        let _ = sink.send(Message::Close(None)).await;
        return;
    };
    tracing::info!("connection opened");
    let mut conn = Connection::new(state.backbone);
    loop {
        let text = match classify(stream.next().await) {
            Inbound::Text(t) => t,
            Inbound::Bytes(b) => match String::from_utf8(b) {
                Ok(t) => t,
                Err(e) => {
                    let err = ServerMessage::protocol_error(format!("message is not UTF-8: {}", e.utf8_error()));
                    if !send(&mut sink, vec![err]).await {
                        break;
                    }
                    continue;
                }
            },
            Inbound::Skip => continue,
            Inbound::Closed => break,
        };
        let ok = match tokio::task::block_in_place(|| conn.dispatch(&text)) {
            Dispatch::Reply(out) => send(&mut sink, out).await,
            Dispatch::Train(job) => run_training(&mut conn, job, &mut sink, &mut stream).await,
        };
        if !ok {
            break;
        }
    }
    tracing::info!("connection closed");
}

/// Reply to a message that arrives while training is in progress.
fn busy_reply(bytes: &[u8]) -> ServerMessage {
    let parsed = std::str::from_utf8(bytes)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str::<ClientMessage>(t).map_err(|e| e.to_string()));
    match parsed {
        Ok(_) => ServerMessage::error(&Error::WrongState("training in progress".into())),
        Err(detail) => ServerMessage::protocol_error(detail),
    }
}

/// Streams progress until training ends. Returns `false` once the client
/// has gone away; training is then cancelled at the next batch boundary.
async fn run_training(
    conn: &mut Connection,
    job: TrainJob,
    sink: &mut Sink,
    stream: &mut SplitStream<WebSocket>,
) -> bool {
    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, mut rx) = mpsc::unbounded_channel();
    let flag = Arc::clone(&cancel);
    let mut task = tokio::task::spawn_blocking(move || {
        job.run(
            |m| {
                let _ = tx.send(m);
            },
            Some(&flag),
        )
    });
    let mut open = true;
    let outcome = loop {
        tokio::select! {
            biased;
            Some(m) = rx.recv() => {
                if open && !send(sink, vec![m]).await {
                    open = false;
                    cancel.store(true, Ordering::Relaxed);
                }
            }
            done = &mut task => {
                break done.unwrap_or_else(|e| Err(Error::Inference(format!("training task failed: {e}"))));
            }
            item = stream.next(), if open => {
                let reply = match classify(item) {
                    Inbound::Text(t) => busy_reply(t.as_bytes()),
                    Inbound::Bytes(b) => busy_reply(&b),
                    Inbound::Skip => continue,
                    Inbound::Closed => {
                        open = false;
                        cancel.store(true, Ordering::Relaxed);
                        continue;
                    }
                };
                if !send(sink, vec![reply]).await {
                    open = false;
                    cancel.store(true, Ordering::Relaxed);
                }
            }
        }
    };
    let mut out = Vec::new();
    while let Ok(m) = rx.try_recv() {
        out.push(m);
    }
    out.extend(conn.finish_training(outcome));
    open && send(sink, out).await
}

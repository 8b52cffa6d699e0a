//! JSON message protocol spoken over the session WebSocket.
//!
//! Each connection owns at most one [`TeachingSession`]. Every inbound
//! message yields its replies in order; anything that fails to parse or
//! dispatch yields exactly one `error` message and leaves the connection
//! usable.

use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Frame};
use crate::error::{Error, Result};
use crate::eval::{evaluate_frame, EvalOptions, LabelScore, Latency, WireSaliency};
use crate::session::{create_session, SessionState, TeachingSession};
use crate::trainer::{self, Example, LinearHead, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    CreateSession {
        #[serde(default)]
        config: Option<TrainConfig>,
        #[serde(default)]
        seed: Option<u64>,
    },
    AddLabel {
        name: String,
    },
    AddSample {
        label_id: usize,
        /// base64 PNG or JPEG, optionally as a `data:` URL.
        frame: String,
    },
    ClearLabel {
        label_id: usize,
    },
    Train {},
    Frame {
        frame: String,
        #[serde(default)]
        selected_class: Option<usize>,
    },
    SelectClass {
        class_id: Option<usize>,
    },
    Reopen {},
    Save {},
    Load {
        blob: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelInfo {
    pub id: usize,
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionCreated {
        labels: Vec<LabelInfo>,
        seed: u64,
        config: TrainConfig,
        backbone_id: String,
    },
    LabelAdded {
        label_id: usize,
        name: String,
    },
    SampleAdded {
        label_id: usize,
        count: usize,
    },
    LabelCleared {
        label_id: usize,
        count: usize,
    },
    TrainProgress {
        epoch: usize,
        epochs: usize,
        loss: f64,
    },
    Trained {
        report: TrainReport,
    },
    Prediction {
        scores: Vec<LabelScore>,
        saliency: WireSaliency,
        latency: Latency,
        timestamp_ms: u64,
    },
    ClassSelected {
        class_id: Option<usize>,
    },
    Reopened {
        labels: Vec<LabelInfo>,
    },
    Saved {
        blob: String,
    },
    SessionLoaded {
        labels: Vec<LabelInfo>,
        state: SessionState,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl ServerMessage {
    pub fn error(err: &Error) -> Self {
        ServerMessage::Error { code: err.code().to_string(), detail: err.to_string() }
    }

    pub fn protocol_error(detail: impl Into<String>) -> Self {
        ServerMessage::Error { code: "protocol".into(), detail: detail.into() }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, ServerMessage::Error { .. })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Snapshot of the data needed to train a session's head off-thread.
#[derive(Debug, Clone)]
pub struct TrainJob {
    classes: usize,
    data: Vec<(Vec<f64>, usize)>,
    config: TrainConfig,
    seed: u64,
}

impl TrainJob {
    pub fn run(
        &self,
        mut on_message: impl FnMut(ServerMessage),
        cancel: Option<&AtomicBool>,
    ) -> Result<(LinearHead, TrainReport)> {
        let examples: Vec<Example<'_>> = self
            .data
            .iter()
            .map(|(f, label)| Example { features: f, label: *label })
            .collect();
        trainer::train(
            self.classes,
            &examples,
            &self.config,
            self.seed,
            |p| on_message(ServerMessage::TrainProgress { epoch: p.epoch, epochs: p.epochs, loss: p.mean_loss }),
            cancel,
        )
    }
}

pub enum Dispatch {
    Reply(Vec<ServerMessage>),
    /// The session is now `Training`; run the job and hand the outcome to
    /// [`Connection::finish_training`].
    Train(TrainJob),
}

/// Per-connection protocol state.
pub struct Connection {
    backbone: Arc<Backbone>,
    session: Option<TeachingSession>,
    selected_class: Option<usize>,
    opened: Instant,
}

fn decode_frame(data: &str, timestamp_ms: u64) -> Result<Frame> {
    let payload = match data.strip_prefix("data:") {
        Some(rest) => rest.split_once(',').map(|(_, b)| b).unwrap_or(rest),
        None => data,
    };
    let bytes = B64
        .decode(payload.trim())
        .map_err(|e| Error::Decode(format!("frame is not valid base64: {e}")))?;
    Frame::decode(&bytes, timestamp_ms)
}

impl Connection {
    pub fn new(backbone: Arc<Backbone>) -> Self {
        Self { backbone, session: None, selected_class: None, opened: Instant::now() }
    }

    pub fn session(&self) -> Option<&TeachingSession> {
        self.session.as_ref()
    }

    pub fn selected_class(&self) -> Option<usize> {
        self.selected_class
    }

    fn session_mut(&mut self) -> Result<&mut TeachingSession> {
        self.session
            .as_mut()
            .ok_or_else(|| Error::WrongState("no session; send create_session first".into()))
    }

    fn session_ref(&self) -> Result<&TeachingSession> {
        self.session
            .as_ref()
            .ok_or_else(|| Error::WrongState("no session; send create_session first".into()))
    }

    fn label_infos(session: &TeachingSession) -> Vec<LabelInfo> {
        session
            .labels()
            .iter()
            .map(|l| LabelInfo { id: l.id, name: l.name.clone(), count: session.store().count(l.id) })
            .collect()
    }

    fn now_ms(&self) -> u64 {
        self.opened.elapsed().as_millis() as u64
    }

    /// Handles a raw frame payload; non-UTF-8 input is a protocol error.
    pub fn handle_bytes(&mut self, bytes: &[u8]) -> Vec<ServerMessage> {
        match std::str::from_utf8(bytes) {
            Ok(text) => self.handle_text(text),
            Err(e) => vec![ServerMessage::protocol_error(format!("message is not UTF-8: {e}"))],
        }
    }

    /// Handles one message, running any training inline.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match self.dispatch(text) {
            Dispatch::Reply(out) => out,
            Dispatch::Train(job) => {
                let mut out = Vec::new();
                let outcome = job.run(|m| out.push(m), None);
                out.extend(self.finish_training(outcome));
                out
            }
        }
    }

    pub fn dispatch(&mut self, text: &str) -> Dispatch {
        let message: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return Dispatch::Reply(vec![ServerMessage::protocol_error(e.to_string())]),
        };
        if matches!(message, ClientMessage::Train {}) {
            return match self.start_training() {
                Ok(job) => Dispatch::Train(job),
                Err(e) => Dispatch::Reply(vec![ServerMessage::error(&e)]),
            };
        }
        Dispatch::Reply(match self.apply(message) {
            Ok(out) => out,
            Err(e) => vec![ServerMessage::error(&e)],
        })
    }

    fn start_training(&mut self) -> Result<TrainJob> {
        let session = self.session_mut()?;
        session.begin_training()?;
        Ok(TrainJob {
            classes: session.labels().len(),
            data: session
                .training_examples()
                .into_iter()
                .map(|e| (e.features.to_vec(), e.label))
                .collect(),
            config: *session.config(),
            seed: session.seed(),
        })
    }

    /// Installs the trained head, or returns the session to Teaching.
    pub fn finish_training(&mut self, outcome: Result<(LinearHead, TrainReport)>) -> Vec<ServerMessage> {
        let Some(session) = self.session.as_mut() else {
            return vec![ServerMessage::error(&Error::WrongState("session vanished during training".into()))];
        };
        let result = match outcome {
            Ok((head, report)) => session
                .complete_training(head, report.clone())
                .map(|_| ServerMessage::Trained { report }),
            Err(e) => {
                let _ = session.abort_training();
                Err(e)
            }
        };
        self.selected_class = None;
        vec![result.unwrap_or_else(|e| ServerMessage::error(&e))]
    }

    fn apply(&mut self, message: ClientMessage) -> Result<Vec<ServerMessage>> {
        let reply = match message {
            ClientMessage::CreateSession { config, seed } => {
                if self.session.as_ref().is_some_and(|s| s.state() == SessionState::Training) {
                    return Err(Error::WrongState("cannot replace a session while it trains".into()));
                }
                let session = create_session(&self.backbone, config.unwrap_or_default(), seed.unwrap_or(0))?;
                let reply = ServerMessage::SessionCreated {
                    labels: Vec::new(),
                    seed: session.seed(),
                    config: *session.config(),
                    backbone_id: session.backbone_id().to_string(),
                };
                self.session = Some(session);
                self.selected_class = None;
                reply
            }
            ClientMessage::AddLabel { name } => {
                let label_id = self.session_mut()?.add_label(&name)?;
                ServerMessage::LabelAdded { label_id, name }
            }
            ClientMessage::AddSample { label_id, frame } => {
                let session = self.session_ref()?;
                if session.state() != SessionState::Teaching {
                    return Err(Error::WrongState(format!("cannot add samples while {:?}", session.state())));
                }
                session.label(label_id)?;
                let frame = decode_frame(&frame, self.now_ms())?;
                let backbone = Arc::clone(&self.backbone);
                let count = self.session_mut()?.add_sample(label_id, &frame, &backbone)?;
                ServerMessage::SampleAdded { label_id, count }
            }
            ClientMessage::ClearLabel { label_id } => {
                let session = self.session_mut()?;
                session.clear_label(label_id)?;
                ServerMessage::LabelCleared { label_id, count: 0 }
            }
            ClientMessage::Train {} => unreachable!("handled in dispatch"),
            ClientMessage::Frame { frame, selected_class } => {
                let session = self.session_ref()?;
                session.active_head()?;
                let frame = decode_frame(&frame, self.now_ms())?;
                let options = EvalOptions {
                    selected_class: selected_class.or(self.selected_class),
                    ..Default::default()
                };
                let r = evaluate_frame(session, &self.backbone, &frame, &options)?;
                ServerMessage::Prediction {
                    scores: r.scores,
                    saliency: r.saliency,
                    latency: r.latency,
                    timestamp_ms: frame.timestamp_ms(),
                }
            }
            ClientMessage::SelectClass { class_id } => {
                let session = self.session_ref()?;
                if session.state() == SessionState::Training {
                    return Err(Error::WrongState("cannot select a class while training".into()));
                }
                if let Some(c) = class_id {
                    session.label(c)?;
                }
                self.selected_class = class_id;
                ServerMessage::ClassSelected { class_id }
            }
            ClientMessage::Reopen {} => {
                let session = self.session_mut()?;
                session.reopen_teaching()?;
                let labels = Self::label_infos(session);
                self.selected_class = None;
                ServerMessage::Reopened { labels }
            }
            ClientMessage::Save {} => {
                let json = self.session_ref()?.to_json()?;
                ServerMessage::Saved { blob: B64.encode(json) }
            }
            ClientMessage::Load { blob } => {
                if self.session.as_ref().is_some_and(|s| s.state() == SessionState::Training) {
                    return Err(Error::WrongState("cannot replace a session while it trains".into()));
                }
                let bytes = B64
                    .decode(blob.trim())
                    .map_err(|e| Error::Parse { offset: None, detail: format!("blob is not base64: {e}") })?;
                let text = String::from_utf8(bytes)
                    .map_err(|e| Error::Parse { offset: None, detail: format!("blob is not UTF-8: {e}") })?;
                let session = TeachingSession::from_json(&text, &self.backbone)?;
                let reply = ServerMessage::SessionLoaded {
                    labels: Self::label_infos(&session),
                    state: session.state(),
                };
                self.session = Some(session);
                self.selected_class = None;
                reply
            }
        };
        Ok(vec![reply])
    }
}

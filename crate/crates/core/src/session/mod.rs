//! Teaching-session lifecycle.
//!
//! ```text
//! Teaching --begin_training--> Training --complete_training--> Evaluating
//!    ^                            |                                |
//!    +-------- abort_training ----+                                |
//!    +------------------------ reopen_teaching --------------------+
//! ```
//!
//! Every mutating call checks its preconditions before touching anything, so
//! a rejected call leaves the session exactly as it was.

mod persist;

use std::path::Path;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureShape, FeatureTensor, Frame};
use crate::error::{Error, Result};
use crate::trainer::{self, EpochProgress, Example, LinearHead, TrainConfig, TrainReport};

pub use persist::SESSION_FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Teaching,
    Training,
    Evaluating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub id: usize,
    pub name: String,
}

/// Stored teaching features, one list per label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    shape: FeatureShape,
    per_label: Vec<Vec<FeatureTensor>>,
}

impl SampleStore {
    fn new(shape: FeatureShape) -> Self {
        Self { shape, per_label: Vec::new() }
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn count(&self, label_id: usize) -> usize {
        self.per_label.get(label_id).map_or(0, Vec::len)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_label.iter().map(Vec::len).collect()
    }

    pub fn samples(&self, label_id: usize) -> &[FeatureTensor] {
        self.per_label.get(label_id).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.per_label.iter().map(Vec::len).sum()
    }
}

/// Accuracy and loss curve of the last training run; survives persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeachingSession {
    labels: Vec<LabelDef>,
    store: SampleStore,
    state: SessionState,
    head: Option<LinearHead>,
    head_stale: bool,
    summary: Option<TrainingSummary>,
    last_report: Option<TrainReport>,
    config: TrainConfig,
    seed: u64,
    backbone_id: String,
}

/// Starts an empty session bound to `backbone`.
pub fn create_session(backbone: &Backbone, config: TrainConfig, seed: u64) -> Result<TeachingSession> {
    config.validate()?;
    Ok(TeachingSession {
        labels: Vec::new(),
        store: SampleStore::new(backbone.output_shape()),
        state: SessionState::Teaching,
        head: None,
        head_stale: false,
        summary: None,
        last_report: None,
        config,
        seed,
        backbone_id: backbone.id().to_string(),
    })
}

impl TeachingSession {
    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Result<&LabelDef> {
        self.labels
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("label {id}")))
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn store(&self) -> &SampleStore {
        &self.store
    }

    pub fn counts(&self) -> Vec<usize> {
        self.store.counts()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.store.shape
    }

    /// The stored head, stale or not.
    pub fn head(&self) -> Option<&LinearHead> {
        self.head.as_ref()
    }

    pub fn is_head_stale(&self) -> bool {
        self.head_stale
    }

    pub fn summary(&self) -> Option<&TrainingSummary> {
        self.summary.as_ref()
    }

    /// Full report (with wall-clock time) of a run made in this process.
    pub fn last_report(&self) -> Option<&TrainReport> {
        self.last_report.as_ref()
    }

    /// The head to evaluate with; only available while evaluating.
    pub fn active_head(&self) -> Result<&LinearHead> {
        if self.state != SessionState::Evaluating {
            return Err(self.wrong_state("evaluate", &[SessionState::Evaluating]));
        }
        match (&self.head, self.head_stale) {
            (Some(h), false) => Ok(h),
            _ => Err(Error::WrongState("the model is stale; retrain before evaluating".into())),
        }
    }

    fn wrong_state(&self, op: &str, allowed: &[SessionState]) -> Error {
        Error::WrongState(format!("cannot {op} while {:?} (allowed in {allowed:?})", self.state))
    }

    fn require(&self, op: &str, state: SessionState) -> Result<()> {
        if self.state == state {
            Ok(())
        } else {
            Err(self.wrong_state(op, &[state]))
        }
    }

    pub fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.id() != self.backbone_id {
            return Err(Error::Compatibility {
                expected: self.backbone_id.clone(),
                found: backbone.id().to_string(),
            });
        }
        Ok(())
    }

    pub fn add_label(&mut self, name: &str) -> Result<usize> {
        self.require("add a label", SessionState::Teaching)?;
        if name.is_empty() {
            return Err(Error::invalid("label name must not be empty"));
        }
        if self.label_id(name).is_some() {
            return Err(Error::Conflict(format!("label {name:?} already exists")));
        }
        let id = self.labels.len();
        self.labels.push(LabelDef { id, name: name.to_string() });
        self.store.per_label.push(Vec::new());
        Ok(id)
    }

    /// Extracts features from `frame` and stores them under `label_id`.
    pub fn add_sample(&mut self, label_id: usize, frame: &Frame, backbone: &Backbone) -> Result<usize> {
        self.require("add a sample", SessionState::Teaching)?;
        self.label(label_id)?;
        self.check_backbone(backbone)?;
        let features = backbone.features_for(frame)?;
        self.add_features(label_id, features)
    }

    /// Stores already-extracted features.
    pub fn add_features(&mut self, label_id: usize, features: FeatureTensor) -> Result<usize> {
        self.require("add a sample", SessionState::Teaching)?;
        self.label(label_id)?;
        if features.shape() != self.store.shape {
            return Err(Error::invalid(format!(
                "features of shape {} do not match the session's {}",
                features.shape(),
                self.store.shape
            )));
        }
        let samples = &mut self.store.per_label[label_id];
        samples.push(features);
        Ok(samples.len())
    }

    /// Drops every sample of one label.
    pub fn clear_label(&mut self, label_id: usize) -> Result<()> {
        self.require("clear a label", SessionState::Teaching)?;
        self.label(label_id)?;
        self.store.per_label[label_id].clear();
        Ok(())
    }

    pub fn begin_training(&mut self) -> Result<()> {
        self.require("train", SessionState::Teaching)?;
        if self.labels.len() < 2 {
            return Err(Error::Precondition(format!(
                "training needs at least 2 labels, have {}",
                self.labels.len()
            )));
        }
        if let Some(empty) = self.labels.iter().find(|l| self.store.count(l.id) == 0) {
            return Err(Error::Precondition(format!("label {:?} has no samples", empty.name)));
        }
        self.state = SessionState::Training;
        Ok(())
    }

    /// Training data in label order, insertion order within a label.
    pub fn training_examples(&self) -> Vec<Example<'_>> {
        self.store
            .per_label
            .iter()
            .enumerate()
            .flat_map(|(label, samples)| samples.iter().map(move |f| Example { features: f.gap(), label }))
            .collect()
    }

    pub fn complete_training(&mut self, head: LinearHead, report: TrainReport) -> Result<()> {
        self.require("complete training", SessionState::Training)?;
        if head.classes() != self.labels.len() || head.features() != self.store.shape.k {
            return Err(Error::invalid(format!(
                "head is {}x{}, session needs {}x{}",
                head.classes(),
                head.features(),
                self.labels.len(),
                self.store.shape.k
            )));
        }
        self.head = Some(head);
        self.head_stale = false;
        self.summary = Some(TrainingSummary {
            epoch_losses: report.epoch_losses.clone(),
            train_accuracy: report.train_accuracy,
        });
        self.last_report = Some(report);
        self.state = SessionState::Evaluating;
        Ok(())
    }

    /// Returns a cancelled or failed run to Teaching with no head.
    pub fn abort_training(&mut self) -> Result<()> {
        self.require("abort training", SessionState::Training)?;
        self.head = None;
        self.head_stale = false;
        self.state = SessionState::Teaching;
        Ok(())
    }

    /// Back to Teaching for corrections; the head is kept but marked stale.
    pub fn reopen_teaching(&mut self) -> Result<()> {
        self.require("reopen teaching", SessionState::Evaluating)?;
        self.head_stale = true;
        self.state = SessionState::Teaching;
        Ok(())
    }

    /// `begin_training`, train, then `complete_training` (or `abort_training`
    /// on failure).
    pub fn train(
        &mut self,
        on_epoch: impl FnMut(EpochProgress),
        cancel: Option<&AtomicBool>,
    ) -> Result<TrainReport> {
        self.begin_training()?;
        let outcome = {
            let examples = self.training_examples();
            trainer::train(self.labels.len(), &examples, &self.config, self.seed, on_epoch, cancel)
        };
        match outcome {
            Ok((head, report)) => {
                self.complete_training(head, report.clone())?;
                Ok(report)
            }
            Err(e) => {
                self.abort_training()?;
                Err(e)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json(self)
    }

    pub fn from_json(text: &str, backbone: &Backbone) -> Result<Self> {
        persist::from_json(text, backbone)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path, backbone: &Backbone) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text, backbone)
    }
}

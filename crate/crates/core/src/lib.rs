//! Interactive machine teaching on frozen backbone features.
//!
//! A [`session::TeachingSession`] collects labelled feature maps, trains a
//! linear softmax head on their global-average-pooled vectors and explains
//! each prediction with a class activation map.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod par;
pub mod protocol;
pub mod saliency;
pub mod session;
pub mod tensor;
pub mod trainer;

pub use backbone::{load_backbone, make_test_backbone, Backbone, FeatureShape, FeatureTensor, Frame};
pub use error::{Error, Result};
pub use eval::{bench, evaluate_frame, BenchReport, EvalOptions, PredictionResult};
pub use saliency::{compute_cam, render_overlay, SaliencyGrid};
pub use session::{create_session, SessionState, TeachingSession};
pub use tensor::{argmax_class, bilinear_resize, cross_entropy, minmax_normalize, softmax, Grid2D, Logits, Probabilities};
pub use trainer::{adam_step, forward, init_head, train, AdamState, LinearHead, TrainConfig, TrainReport};

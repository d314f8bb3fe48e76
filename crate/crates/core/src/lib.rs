//! Out-of-distribution detection toolkit.
//!
//! Trains a compact softmax classifier, optionally fine-tunes it with the
//! OECC objective (cross-entropy plus a confidence-calibration term on
//! in-distribution data and an l1-to-uniform term on outlier-exposure data),
//! and scores inputs with post-training detectors:
//!
//! - [`metrics::msp_score`]: maximum softmax probability baseline,
//! - [`mahalanobis`]: class-conditional Gaussians with tied covariance over
//!   every captured layer, combined by logistic regression,
//! - [`fcgm`]: per-class min/max bounds on higher-order Gram matrices of
//!   feature maps.
//!
//! [`metrics`] evaluates detectors with TNR at 95% TPR, AUROC and detection
//! accuracy; [`harness`] runs the whole protocol end to end.

pub mod data;
pub mod error;
pub mod fcgm;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod mahalanobis;
pub mod metrics;
pub mod nn;
pub mod synthgen;
pub mod tensor;
pub mod toy;

pub use data::{Dataset, ImageBatch, Role, SplitPlan};
pub use error::{Error, Result};
pub use fcgm::{Deviation, GramBounds};
pub use losses::OeccConfig;
pub use mahalanobis::{ConfidenceScore, MahalanobisState};
pub use metrics::{EvalResult, ScoreSample};
pub use nn::{Checkpoint, ForwardTrace, LayerSpec, LrSchedule, Network, TrainConfig};
pub use synthgen::{GenKind, GenSpec};
pub use tensor::Tensor;

//! Split federated learning with dual-side ownership watermarking.
//!
//! A network is cut into a client-held bottom model and a server-held top
//! model. Clients forward split-layer activations ("smashed data") plus
//! labels; the server finishes the forward pass, backpropagates, and returns
//! the split-layer gradient. Bottom models are merged with weighted averaging
//! at the end of every round.
//!
//! Ownership marks are embedded on both sides during training:
//!
//! - the server drives the signs of selected normalization-scale weights
//!   toward a secret bit signature through a hinge regularizer, verified by
//!   the sign-agreement rate `theta_F`;
//! - each client stamps a secret trigger patch onto a fraction of its local
//!   data with a relabeled target class, verified by the triggered-sample
//!   target rate `theta_B`.
//!
//! The [`attack`] module evaluates both marks against fine-tuning, magnitude
//! pruning, quantization, and trigger reverse-engineering with unlearning.
//! The [`harness`] module orchestrates full experiments and emits metrics.

pub mod arch;
pub mod attack;
pub mod binfmt;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layer;
pub mod loss;
pub mod model;
pub mod seed;
pub mod sfl;
pub mod stats;
pub mod tensor;
pub mod trigger;
pub mod watermark;

pub use attack::{AttackConfig, QuantScheme, ReversedTrigger};
pub use config::{ExperimentConfig, Stage};
pub use harness::{MetricsRow, RunReport};

pub use data::{DatasetSpec, LabeledDataset};
pub use error::{Error, Result};

pub use layer::{Layer, Mode};
pub use model::Model;
pub use sfl::{BackwardMsg, ForwardMsg, RoundRecord, SplitModelPair, TrainConfig};
pub use tensor::Tensor;
pub use trigger::TriggerPattern;
pub use watermark::{BottomVerification, FeatureWatermark, VerificationReport};

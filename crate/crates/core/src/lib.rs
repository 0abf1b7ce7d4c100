//! Infrared-visible image fusion with distilled text priors.
//!
//! The crate provides the full pipeline: pure image primitives
//! ([`imgmath`]), the fusion-quality metric suite ([`metrics`]), the
//! dual-stream attention fusion network ([`net`]), training objectives
//! ([`losses`]), text-prior plumbing ([`textprior`]), dataset tooling
//! ([`data`]) and the two-stage trainer ([`trainer`]).

pub mod data;
pub mod error;
pub mod imgmath;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod textprior;
pub mod trainer;

pub use error::{Error, Result};
pub use imgmath::{Channels, GradientPair, Image};
pub use losses::LossWeights;
pub use metrics::MetricReport;
pub use net::{FeaturePyramid, FusionNet, NetConfig};
pub use textprior::TextEmbedding;
pub use trainer::{Checkpoint, Stage, TrainConfig};

//! Magnetometer-based voice liveness detection: sensing-data ingestion, DSP
//! preprocessing, acoustic ranging, a from-scratch differentiable model with
//! contrastive training, biometric evaluation, and a physics-inspired
//! synthetic corpus generator.

pub mod dsp;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ranging;
pub mod synth;
pub mod trace;
pub mod train;
pub mod vad;

pub use dsp::{FeatureTensor, UniformSeries};
pub use eval::{EvalReport, ScoredSample};
pub use model::MagLiveModel;
pub use ranging::{RangeEstimate, RangingConfig};
pub use trace::{AudioClip, DatasetManifest, Label, RecordingPair, SensorTrace};
pub use train::{TrainConfig, TrainSample};
pub use vad::{AlignedSegment, VoiceSegment};

//! Streaming sequence labelling with a hybrid unidirectional/bidirectional
//! encoder and a learned restart policy.

pub mod arm;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod policy;

pub use arm::{ArmConfig, ArmModel, ArmState, PostProcess};
pub use data::{EncodedSentence, Scheme, TaggedSentence, Vocabulary};
pub use encoder::{HybridConfig, HybridEncoder, StreamStep, UniLayerKind, UniState};
pub use error::{Error, Result};
pub use metrics::{aggregate_report, Report};
pub use policy::{run_stream, RestartPolicy, StepRecord, StreamingTranscript};

//! Continual panoptic perception at desk scale: a shared-encoder model for
//! panoptic segmentation and captioning, trained class-incrementally.

pub mod autodiff;
pub mod error;
pub mod nn;
pub mod synthdata;
pub mod schedule;
pub mod matching;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod pseudo;
pub mod harness;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Method, RunRecord, StepRecord};
pub use losses::LossWeights;
pub use matching::Assignment;
pub use metrics::{BleuResult, EvalReport, PqAccumulator};
pub use model::{ForwardOutput, Model, ModelConfig, Variant};
pub use pseudo::{PseudoConfig, PseudoMode};
pub use schedule::{IncrementalSchedule, ProtocolMode, StepView};
pub use synthdata::{ClassDef, ClassKind, PanopticSample, Taxonomy, Vocabulary};

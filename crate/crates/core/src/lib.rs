//! Unsupervised text style transfer via per-token sequential style
//! representations, trained with dual Wasserstein critics stabilized by a
//! frozen teacher classifier, plus the evaluation and explanation harness.

pub mod checkpoint;
pub mod critics;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use data::{Corpus, TokenSequence, Vocabulary};
pub use metrics::{EvalReport, NGramLM};
pub use model::{MssrNet, MssrNetConfig};
pub use params::{AdamConfig, ParameterStore, Role};
pub use teacher::{SalienceConfig, StylisticSpan, TeacherConfig, TeacherModel};
pub use tensor::{Real, Tape, Var};
pub use training::{GainGapRecord, LossWeights, TrainSchedule};

//! Multi-task prompt learning for a small video transformer.
//!
//! Learned per-task prompt tokens ride along with the patch tokens through a
//! joint space-time transformer. During training each prompt's output feeds a
//! head supervised by procedurally generated scene labels; at inference only
//! the CLS path is used.

pub mod backbone;
mod codec;
pub mod config;
pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod model;
pub mod params;
pub mod scenegen;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, ForwardOutputs, PromptLayout, TokenSequence};
pub use config::{DataConfig, RunConfig};
pub use error::{ConfigError, Error, LossError, ModelError, Result, SceneError};
pub use harness::{build_variant, evaluate, Corpus, EvalReport, VariantKind, VariantSpec};
pub use heads::{HeadConfig, HeadSet};
pub use losses::{LossConfig, LossReport, LossWeights, SamplePredictions};
pub use model::{HeadInput, ModelSpec, PvitModel};
pub use params::{Census, CensusMode, ModelParams, ParamGroup};
pub use scenegen::{AnnotationSet, ClassMap, Dataset, Origin, SceneConfig, TaskSet, VideoSample};
pub use task::Task;
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use trainer::{Checkpoint, EpochMetrics, TrainConfig, TrainData, Trainer};

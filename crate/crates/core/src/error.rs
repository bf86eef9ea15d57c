use thiserror::Error;

use crate::task::Task;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no head is configured for task `{0}`")]
    UnknownTask(Task),
    #[error("dense head needs tapped layer {0}, which the forward pass did not record")]
    MissingTap(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("both boxes have zero area")]
    DegenerateBox,
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("sample {sample} carries `{task}` labels but has no `{task}` prediction")]
    MissingPrediction { sample: usize, task: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("a synthetic sample needs a nonempty task mask")]
    InvalidMask,
    #[error("map of shape {shape:?} cannot be pooled onto a {rows}x{cols} grid")]
    ShapeMismatch {
        shape: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-level error of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("training: {0}")]
    Train(String),
    #[error("invalid variant: {0}")]
    InvalidVariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

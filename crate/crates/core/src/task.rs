use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Auxiliary scene tasks, in the fixed order used for prompt slots, heads and
/// loss reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Normal,
    Segm,
    Pose,
    Boxes,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Depth, Task::Normal, Task::Segm, Task::Pose, Task::Boxes];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Normal => "normal",
            Task::Segm => "segm",
            Task::Pose => "pose",
            Task::Boxes => "boxes",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Task::Depth | Task::Normal | Task::Segm)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// Number of 3D joints in a pose label.
pub const POSE_JOINTS: usize = 25;
/// Scalars in a pose label (`25 × 3`).
pub const POSE_DIMS: usize = POSE_JOINTS * 3;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::PromptLayout;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{HeadInput, ModelSpec, PvitModel};
use crate::task::Task;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Pvit,
    Baseline,
    Mt,
    Vpt,
    PvitVpt,
    Op,
    Np,
    Shuffled,
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::Pvit,
        VariantKind::Baseline,
        VariantKind::Mt,
        VariantKind::Vpt,
        VariantKind::PvitVpt,
        VariantKind::Op,
        VariantKind::Np,
        VariantKind::Shuffled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Pvit => "pvit",
            VariantKind::Baseline => "baseline",
            VariantKind::Mt => "mt",
            VariantKind::Vpt => "vpt",
            VariantKind::PvitVpt => "pvit-vpt",
            VariantKind::Op => "op",
            VariantKind::Np => "np",
            VariantKind::Shuffled => "shuffled",
        }
    }

    fn has_prompts(self) -> bool {
        !matches!(self, VariantKind::Baseline | VariantKind::Mt)
    }

    fn uses_synthetic(self) -> bool {
        !matches!(self, VariantKind::Baseline | VariantKind::Vpt | VariantKind::Np)
    }

    fn freezes_backbone(self) -> bool {
        matches!(self, VariantKind::Vpt | VariantKind::PvitVpt)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// A variant plus optional explicit overrides. Overrides that contradict
/// the variant's definition are rejected rather than applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub prompt_count: Option<usize>,
    pub freeze_backbone: Option<bool>,
    pub synthetic: Option<bool>,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::of(VariantKind::Pvit)
    }
}

impl VariantSpec {
    pub fn of(kind: VariantKind) -> Self {
        Self {
            kind,
            prompt_count: None,
            freeze_backbone: None,
            synthetic: None,
        }
    }
}

/// A wired model and the data policy that goes with it.
#[derive(Clone, Debug)]
pub struct VariantPlan {
    pub kind: VariantKind,
    pub model: PvitModel,
    pub train: TrainConfig,
    pub uses_synthetic: bool,
    pub shuffle_annotations: bool,
}

fn invalid(kind: VariantKind, msg: &str) -> Error {
    Error::InvalidVariant(format!("{kind}: {msg}"))
}

/// Tasks named anywhere in the synthetic task pool, in canonical order.
fn pooled_tasks(train: &TrainConfig) -> Vec<Task> {
    Task::ALL
        .into_iter()
        .filter(|t| train.task_pool.iter().any(|set| set.contains(t)))
        .collect()
}

/// Builds the model and training policy for `spec` from a base config,
/// initialized from `seed`.
///
/// Variants without synthetic data keep the base batch's real share, so
/// every variant sees the same real stream in the same number of steps.
pub fn build_variant(spec: &VariantSpec, base: &RunConfig, seed: u64) -> Result<VariantPlan> {
    let kind = spec.kind;
    let n = match (kind.has_prompts(), spec.prompt_count) {
        (false, Some(n)) if n > 0 => return Err(invalid(kind, "this variant has no prompts (prompt_count must be 0)")),
        (false, _) => 0,
        (true, Some(0)) => return Err(invalid(kind, "this variant needs at least one prompt")),
        (true, Some(n)) => n,
        (true, None) if base.backbone.prompt_count == 0 => {
            return Err(invalid(kind, "this variant needs backbone.prompt_count >= 1"))
        }
        (true, None) => base.backbone.prompt_count,
    };
    if spec.freeze_backbone.is_some_and(|f| f != kind.freezes_backbone()) {
        return Err(invalid(kind, "freeze_backbone contradicts the variant"));
    }
    if spec.synthetic.is_some_and(|s| s != kind.uses_synthetic()) {
        return Err(invalid(kind, "synthetic contradicts the variant"));
    }

    let mut backbone = base.backbone.clone();
    backbone.prompt_count = n;
    let (layout, head_input) = match kind {
        VariantKind::Baseline => (PromptLayout::None, HeadInput::Prompts),
        VariantKind::Mt => (PromptLayout::None, HeadInput::Cls),
        VariantKind::Op => (PromptLayout::Single, HeadInput::Prompts),
        _ => (PromptLayout::PerTask, HeadInput::Prompts),
    };
    let tasks = if kind.uses_synthetic() {
        pooled_tasks(&base.trainer)
    } else {
        Vec::new()
    };
    let model = PvitModel::new(
        ModelSpec {
            backbone,
            heads: base.heads.clone(),
            layout,
            head_input,
            tasks,
        },
        seed,
    )?;

    let mut train = base.trainer.clone();
    train.seed = seed;
    train.freeze_backbone = kind.freezes_backbone();
    if !kind.uses_synthetic() {
        train.batch_size = base.trainer.real_per_batch();
        train.synth_ratio = 0.0;
    }
    Ok(VariantPlan {
        kind,
        model,
        train,
        uses_synthetic: kind.uses_synthetic(),
        shuffle_annotations: kind == VariantKind::Shuffled,
    })
}

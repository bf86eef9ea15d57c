//! Backbone and heads wired together, with the task-to-prompt assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ForwardOutputs, PromptLayout};
use crate::error::{ConfigError, ModelError};
use crate::heads::{HeadConfig, HeadSet};
use crate::losses::SamplePredictions;
use crate::params::{Bound, Census, CensusMode, ModelParams, ParamGroup};
use crate::task::Task;
use crate::tensor::{Graph, Tensor, Var};

/// Which output token the auxiliary heads read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// Each task reads its own prompt output row.
    Prompts,
    /// All heads share the CLS output.
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub layout: PromptLayout,
    pub head_input: HeadInput,
    /// Tasks that get a head, in slot order.
    pub tasks: Vec<Task>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.layout != PromptLayout::None && self.backbone.prompt_count == 0 {
            return fail("a prompt layout needs prompt_count >= 1");
        }
        if self.layout == PromptLayout::None && self.head_input == HeadInput::Prompts && !self.tasks.is_empty() {
            return fail("task heads reading prompts need a prompt layout");
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return fail("duplicate task in head list");
        }
        if self.heads.seg_classes == 0 || self.heads.box_slots == 0 {
            return fail("heads.seg_classes and heads.box_slots must be positive");
        }
        Ok(())
    }
}

/// Everything one forward pass produces for a sample.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub forward: ForwardOutputs,
    pub predictions: SamplePredictions,
}

#[derive(Clone, Debug)]
pub struct PvitModel {
    spec: ModelSpec,
    params: ModelParams,
    backbone: Backbone,
    heads: HeadSet,
    slots: BTreeMap<Task, usize>,
}

impl PvitModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ConfigError> {
        spec.validate()?;
        let mut params = ModelParams::new(seed);
        let backbone = Backbone::new(&spec.backbone, spec.layout, &mut params);
        let heads = HeadSet::new(&spec.backbone, &spec.heads, &spec.tasks, &mut params);
        let tokens = backbone.prompt_tokens().max(1);
        let slots = spec.tasks.iter().enumerate().map(|(i, &t)| (t, i % tokens)).collect();
        Ok(Self {
            spec,
            params,
            backbone,
            heads,
            slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &HeadSet {
        &self.heads
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.heads.tasks()
    }

    /// Prompt row read by `task`'s head.
    pub fn prompt_slot(&self, task: Task) -> Option<usize> {
        self.slots.get(&task).copied()
    }

    /// Binds all parameters; backbone groups carry no gradient when frozen.
    pub fn bind(&self, g: &mut Graph, freeze_backbone: bool) -> Bound {
        self.params.bind(g, |group| freeze_backbone && group.is_backbone())
    }

    fn task_token(&self, g: &mut Graph, out: &ForwardOutputs, task: Task) -> Result<Var, ModelError> {
        match self.spec.head_input {
            HeadInput::Cls => Ok(out.f_cls),
            HeadInput::Prompts => {
                let rows = out.f_prompts.ok_or(ModelError::UnknownTask(task))?;
                let slot = self.prompt_slot(task).ok_or(ModelError::UnknownTask(task))?;
                Ok(g.slice(rows, 0, slot, 1)?)
            }
        }
    }

    /// Forward pass plus downstream logits and the requested task heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        video: &Tensor,
        tasks: impl IntoIterator<Item = Task>,
    ) -> Result<ModelOutputs, ModelError> {
        let out = self.backbone.forward(g, bound, video)?;
        let logits = self.heads.predict_cls(g, bound, out.f_cls)?;
        let mut predictions = SamplePredictions {
            logits: Some(logits),
            tasks: BTreeMap::new(),
        };
        for task in tasks {
            let token = self.task_token(g, &out, task)?;
            let pred = self.heads.predict(g, bound, task, token, &out.tapped)?;
            predictions.tasks.insert(task, pred);
        }
        Ok(ModelOutputs {
            forward: out,
            predictions,
        })
    }

    /// Downstream logits `[C]` on the inference path: no task heads, no
    /// gradient tracking.
    pub fn logits(&self, video: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| true);
        let out = self.backbone.forward(&mut g, &bound, video)?;
        let logits = self.heads.predict_cls(&mut g, &bound, out.f_cls)?;
        Ok(g.value(logits).clone())
    }

    pub fn predict_class(&self, video: &Tensor) -> Result<usize, ModelError> {
        let logits = self.logits(video)?;
        Ok(argmax(logits.data()))
    }

    /// Drops every auxiliary head and its parameters.
    pub fn strip_task_heads(&mut self) {
        let map = self.params.retain(|p| p.group != ParamGroup::TaskHeads);
        self.heads.clear_tasks();
        self.backbone.remap(&map);
        self.heads.remap(&map);
        self.spec.tasks.clear();
        self.slots.clear();
    }

    /// Exchanges the prompt rows of two tasks together with their slot
    /// assignment, so each head keeps reading the same learned vector.
    pub fn swap_prompt_slots(&mut self, a: Task, b: Task) -> Result<(), ModelError> {
        let (sa, sb) = (
            self.prompt_slot(a).ok_or(ModelError::UnknownTask(a))?,
            self.prompt_slot(b).ok_or(ModelError::UnknownTask(b))?,
        );
        let prompts = match (self.backbone.layout(), self.backbone.prompts()) {
            (PromptLayout::PerTask, Some(id)) => id,
            _ => return Err(ModelError::UnknownTask(a)),
        };
        if sa != sb {
            let d = self.spec.backbone.embed_dim;
            let data = self.params.get_mut(prompts).data_mut();
            for c in 0..d {
                data.swap(sa * d + c, sb * d + c);
            }
        }
        self.slots.insert(a, sb);
        self.slots.insert(b, sa);
        Ok(())
    }

    pub fn census(&self, mode: CensusMode) -> Census {
        self.params.census(mode)
    }

    /// Multiply-accumulates of one inference forward pass.
    pub fn inference_macs(&self) -> u64 {
        self.backbone.forward_macs() + (self.spec.backbone.embed_dim * self.spec.backbone.downstream_classes) as u64
    }

    /// Multiply-accumulates of one training forward pass with every head.
    pub fn training_macs(&self) -> u64 {
        let d = self.spec.backbone.embed_dim;
        self.inference_macs() + self.heads.tasks().map(|t| self.heads.task_macs(t, d)).sum::<u64>()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

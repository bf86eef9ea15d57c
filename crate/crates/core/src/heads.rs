//! Prediction heads: the downstream classifier and one head per auxiliary task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::ModelError;
use crate::params::{Bound, Init, ModelParams, ParamGroup, ParamId};
use crate::task::{Task, POSE_DIMS};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub seg_classes: usize,
    pub box_slots: usize,
    /// Width of each tapped-token projection; 0 selects `embed_dim / 2`.
    pub up_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            seg_classes: 4,
            box_slots: 2,
            up_dim: 0,
        }
    }
}

impl HeadConfig {
    pub fn channels(&self, task: Task) -> usize {
        match task {
            Task::Depth => 1,
            Task::Normal => 3,
            Task::Segm => self.seg_classes,
            Task::Pose => POSE_DIMS,
            Task::Boxes => self.box_slots * 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(params: &mut ModelParams, name: &str, group: ParamGroup, inp: usize, out: usize, std: f64) -> Self {
        Self {
            w: params.add(&format!("{name}.w"), group, &[inp, out], Init::Normal(std)),
            b: params.add(&format!("{name}.b"), group, &[out], Init::Constant(0.0)),
        }
    }

    fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        Ok(g.linear(x, bound.var(self.w), bound.var(self.b))?)
    }

    fn remap(&mut self, map: &[Option<ParamId>]) {
        self.w = map[self.w.index()].expect("kept");
        self.b = map[self.b.index()].expect("kept");
    }
}

/// Fuses projected patch tokens from several depths with a task token.
#[derive(Clone, Debug)]
pub struct DenseHead {
    taps: Vec<(usize, Affine)>,
    hidden: Affine,
    out: Affine,
    channels: usize,
}

#[derive(Clone, Debug)]
enum TaskHead {
    Dense(DenseHead),
    Pose(Affine),
    Boxes(Affine),
}

#[derive(Clone, Debug)]
pub struct HeadSet {
    config: HeadConfig,
    frames: usize,
    grid: (usize, usize),
    cls: Affine,
    tasks: BTreeMap<Task, TaskHead>,
}

impl HeadSet {
    pub fn new(backbone: &BackboneConfig, config: &HeadConfig, tasks: &[Task], params: &mut ModelParams) -> Self {
        let d = backbone.embed_dim;
        let std = backbone.init_std;
        let up = if config.up_dim == 0 {
            (d / 2).max(1)
        } else {
            config.up_dim
        };
        let cls = Affine::new(
            params,
            "head.cls",
            ParamGroup::ClsHead,
            d,
            backbone.downstream_classes,
            std,
        );
        let mut heads = BTreeMap::new();
        for &task in tasks {
            let name = format!("head.{task}");
            let group = ParamGroup::TaskHeads;
            let head = match task {
                Task::Depth | Task::Normal | Task::Segm => {
                    let taps = backbone
                        .tap_layers
                        .iter()
                        .map(|&l| (l, Affine::new(params, &format!("{name}.tap{l}"), group, d, up, std)))
                        .collect::<Vec<_>>();
                    let fused = taps.len() * up + d;
                    TaskHead::Dense(DenseHead {
                        taps,
                        hidden: Affine::new(params, &format!("{name}.fuse1"), group, fused, d, std),
                        out: Affine::new(params, &format!("{name}.fuse2"), group, d, config.channels(task), std),
                        channels: config.channels(task),
                    })
                }
                Task::Pose => TaskHead::Pose(Affine::new(params, &name, group, d, POSE_DIMS, std)),
                Task::Boxes => TaskHead::Boxes(Affine::new(params, &name, group, d, config.channels(task), std)),
            };
            heads.insert(task, head);
        }
        Self {
            config: config.clone(),
            frames: backbone.frames,
            grid: backbone.grid(),
            cls,
            tasks: heads,
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.tasks.keys().copied()
    }

    pub fn has(&self, task: Task) -> bool {
        self.tasks.contains_key(&task)
    }

    pub(crate) fn clear_tasks(&mut self) {
        self.tasks.clear();
    }

    pub(crate) fn remap(&mut self, map: &[Option<ParamId>]) {
        self.cls.remap(map);
        for head in self.tasks.values_mut() {
            match head {
                TaskHead::Dense(d) => {
                    d.taps.iter_mut().for_each(|(_, a)| a.remap(map));
                    d.hidden.remap(map);
                    d.out.remap(map);
                }
                TaskHead::Pose(a) | TaskHead::Boxes(a) => a.remap(map),
            }
        }
    }

    /// Downstream logits `[C]` from the CLS representation; no softmax.
    pub fn predict_cls(&self, g: &mut Graph, bound: &Bound, f_cls: Var) -> Result<Var, ModelError> {
        let logits = self.cls.apply(g, bound, f_cls)?;
        let c = g.shape(logits)[1];
        Ok(g.reshape(logits, &[c])?)
    }

    /// Pose `[1, 75]` or boxes `[O, 4]` from one task token.
    ///
    /// Box rows are squashed into `(0, 1)` and reordered so that
    /// `x1 <= x2` and `y1 <= y2`.
    pub fn predict_localization(
        &self,
        g: &mut Graph,
        bound: &Bound,
        task: Task,
        f_prompt: Var,
    ) -> Result<Var, ModelError> {
        match self.tasks.get(&task) {
            Some(TaskHead::Pose(head)) => head.apply(g, bound, f_prompt),
            Some(TaskHead::Boxes(head)) => {
                let raw = head.apply(g, bound, f_prompt)?;
                let raw = g.reshape(raw, &[self.config.box_slots, 4])?;
                let unit = g.sigmoid(raw);
                let col = |g: &mut Graph, c: usize| g.slice(unit, 1, c, 1);
                let (ax, ay, bx, by) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
                let x1 = g.minimum(ax, bx)?;
                let y1 = g.minimum(ay, by)?;
                let x2 = g.maximum(ax, bx)?;
                let y2 = g.maximum(ay, by)?;
                Ok(g.concat(&[x1, y1, x2, y2], 1)?)
            }
            _ => Err(ModelError::UnknownTask(task)),
        }
    }

    /// Per-cell map `[T, h̃, w̃, channels]` on the patch grid.
    pub fn predict_dense(
        &self,
        g: &mut Graph,
        bound: &Bound,
        task: Task,
        f_prompt: Var,
        tapped: &BTreeMap<usize, Var>,
    ) -> Result<Var, ModelError> {
        let Some(TaskHead::Dense(head)) = self.tasks.get(&task) else {
            return Err(ModelError::UnknownTask(task));
        };
        let mut parts = Vec::with_capacity(head.taps.len() + 1);
        for (layer, proj) in &head.taps {
            let tokens = *tapped.get(layer).ok_or(ModelError::MissingTap(*layer))?;
            parts.push(proj.apply(g, bound, tokens)?);
        }
        let cells = self.frames * self.grid.0 * self.grid.1;
        parts.push(g.tile(f_prompt, cells)?);
        let fused = g.concat(&parts, 1)?;
        let hidden = head.hidden.apply(g, bound, fused)?;
        let hidden = g.gelu(hidden);
        let out = head.out.apply(g, bound, hidden)?;
        Ok(g.reshape(out, &[self.frames, self.grid.0, self.grid.1, head.channels])?)
    }

    pub fn predict(
        &self,
        g: &mut Graph,
        bound: &Bound,
        task: Task,
        f_task: Var,
        tapped: &BTreeMap<usize, Var>,
    ) -> Result<Var, ModelError> {
        if task.is_dense() {
            self.predict_dense(g, bound, task, f_task, tapped)
        } else {
            self.predict_localization(g, bound, task, f_task)
        }
    }

    /// Multiply-accumulate count of one head evaluation.
    pub fn task_macs(&self, task: Task, embed_dim: usize) -> u64 {
        let d = embed_dim as u64;
        match self.tasks.get(&task) {
            None => 0,
            Some(TaskHead::Pose(_)) => d * POSE_DIMS as u64,
            Some(TaskHead::Boxes(_)) => d * self.config.channels(Task::Boxes) as u64,
            Some(TaskHead::Dense(h)) => {
                let cells = (self.frames * self.grid.0 * self.grid.1) as u64;
                let up = if self.config.up_dim == 0 {
                    d / 2
                } else {
                    self.config.up_dim as u64
                };
                let fused = h.taps.len() as u64 * up + d;
                cells * (h.taps.len() as u64 * d * up + fused * d + d * h.channels as u64)
            }
        }
    }
}

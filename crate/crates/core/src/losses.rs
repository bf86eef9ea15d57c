//! Per-task losses, the box GIoU term and the masked weighted total.
//!
//! Squared-error terms are raw sums scaled by explicit prefactors: dense maps
//! by `1 / (T · h̃ · w̃)` (per-cell normalization, then a mean over frames) and
//! pose by `1 / 75`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, LossError};
use crate::scenegen::{AnnotationSet, ClassMap};
use crate::task::Task;
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub depth: f64,
    pub normal: f64,
    pub segm: f64,
    pub pose: f64,
    pub boxes: f64,
    pub dt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 0.5,
            normal: 0.5,
            segm: 0.1,
            pose: 3.0,
            boxes: 0.1,
            dt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn task(&self, task: Task) -> f64 {
        match task {
            Task::Depth => self.depth,
            Task::Normal => self.normal,
            Task::Segm => self.segm,
            Task::Pose => self.pose,
            Task::Boxes => self.boxes,
        }
    }

    pub fn set_task(&mut self, task: Task, value: f64) {
        match task {
            Task::Depth => self.depth = value,
            Task::Normal => self.normal = value,
            Task::Segm => self.segm = value,
            Task::Pose => self.pose = value,
            Task::Boxes => self.boxes = value,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let all = [self.depth, self.normal, self.segm, self.pose, self.boxes, self.dt];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Depths above this are clamped before comparison.
    pub depth_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            depth_clip: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.weights.validate()?;
        if self.depth_clip.is_nan() || self.depth_clip <= 0.0 {
            return Err(ConfigError::Invalid("losses.depth_clip must be positive".into()));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, op: &'static str, pred: Var, gt: &Tensor) -> Result<()> {
    if g.shape(pred) != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: g.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Cells per frame times frames of a `[T, h̃, w̃, ...]` map.
fn cell_count(shape: &[usize]) -> usize {
    shape.iter().take(3).product()
}

fn sum_squared(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    Ok(g.sum(sq))
}

pub fn depth_loss(g: &mut Graph, pred: Var, gt: &Tensor, clip: f64) -> Result<Var> {
    same_shape(g, "depth_loss", pred, gt)?;
    let gt_clipped = Tensor::new(gt.shape(), gt.data().iter().map(|v| v.min(clip)).collect())?;
    let gt = g.constant(gt_clipped);
    let pred = g.clip_max(pred, clip);
    let total = sum_squared(g, pred, gt)?;
    Ok(g.scale(total, 1.0 / cell_count(g.value(gt).shape()) as f64))
}

pub fn normal_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    same_shape(g, "normal_loss", pred, gt)?;
    let cells = cell_count(gt.shape());
    let gt = g.constant(gt.clone());
    let total = sum_squared(g, pred, gt)?;
    Ok(g.scale(total, 1.0 / cells as f64))
}

pub fn segm_loss(g: &mut Graph, logits: Var, gt: &ClassMap) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 || shape[..3] != gt.dims {
        return Err(TensorError::ShapeMismatch {
            op: "segm_loss",
            lhs: shape,
            rhs: gt.dims.to_vec(),
        }
        .into());
    }
    let classes = shape[3];
    if let Some(&class) = gt.classes.iter().find(|&&c| c >= classes) {
        return Err(LossError::ClassOutOfRange { class, classes });
    }
    let cells = gt.classes.len();
    let flat = g.reshape(logits, &[cells, classes])?;
    let logp = g.log_softmax(flat, 1)?;
    let picked = g.pick(logp, &gt.classes)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / cells as f64))
}

pub fn pose_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    same_shape(g, "pose_loss", pred, gt)?;
    let n = gt.numel();
    let gt = g.constant(gt.clone());
    let total = sum_squared(g, pred, gt)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Generalized IoU of two corner boxes `(x1, y1, x2, y2)`.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    let inter_w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let inter_h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = inter_w * inter_h;
    let union = area(a) + area(b) - inter;
    let hull = area(&[a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    if union <= 0.0 || hull <= 0.0 {
        return Err(LossError::DegenerateBox);
    }
    Ok(inter / union - (hull - union) / hull)
}

/// Mean over slots of `L1 + (1 − GIoU)`; slots correspond by index.
pub fn box_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    same_shape(g, "box_loss", pred, gt)?;
    if gt.rank() != 2 || gt.shape()[1] != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "box_loss",
            lhs: gt.shape().to_vec(),
            rhs: vec![0, 4],
        }
        .into());
    }
    let slots = gt.shape()[0];
    let target = g.constant(gt.clone());
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let l1 = g.reduce(abs, crate::tensor::ReduceKind::Sum, Some(1))?;
    let l1 = g.reshape(l1, &[slots, 1])?;

    let col = |g: &mut Graph, v: Var, c: usize| g.slice(v, 1, c, 1);
    let (px1, py1, px2, py2) = (col(g, pred, 0)?, col(g, pred, 1)?, col(g, pred, 2)?, col(g, pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (
        col(g, target, 0)?,
        col(g, target, 1)?,
        col(g, target, 2)?,
        col(g, target, 3)?,
    );
    let extent = |g: &mut Graph, lo: Var, hi: Var| -> Result<Var> {
        let d = g.sub(hi, lo)?;
        Ok(g.relu(d))
    };
    let box_area = |g: &mut Graph, x1, y1, x2, y2| -> Result<Var> {
        let w = extent(g, x1, x2)?;
        let h = extent(g, y1, y2)?;
        Ok(g.mul(w, h)?)
    };
    let area_p = box_area(g, px1, py1, px2, py2)?;
    let area_t = box_area(g, tx1, ty1, tx2, ty2)?;
    let (ix1, iy1) = (g.maximum(px1, tx1)?, g.maximum(py1, ty1)?);
    let (ix2, iy2) = (g.minimum(px2, tx2)?, g.minimum(py2, ty2)?);
    let inter = box_area(g, ix1, iy1, ix2, iy2)?;
    let (hx1, hy1) = (g.minimum(px1, tx1)?, g.minimum(py1, ty1)?);
    let (hx2, hy2) = (g.maximum(px2, tx2)?, g.maximum(py2, ty2)?);
    let hull = box_area(g, hx1, hy1, hx2, hy2)?;
    let sum_areas = g.add(area_p, area_t)?;
    let union = g.sub(sum_areas, inter)?;
    if g.value(union)
        .data()
        .iter()
        .chain(g.value(hull).data())
        .any(|&v| v <= 0.0)
    {
        return Err(LossError::DegenerateBox);
    }
    let iou = g.div(inter, union)?;
    let slack = g.sub(hull, union)?;
    let penalty = g.div(slack, hull)?;
    let giou = g.sub(iou, penalty)?;
    let per_slot = g.sub(l1, giou)?;
    let per_slot = g.add_scalar(per_slot, 1.0);
    let total = g.sum(per_slot);
    Ok(g.scale(total, 1.0 / slots as f64))
}

/// Softmax cross-entropy of `[C]` logits against one class.
pub fn downstream_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let classes = g.value(logits).numel();
    if label >= classes {
        return Err(LossError::ClassOutOfRange { class: label, classes });
    }
    let row = g.reshape(logits, &[1, classes])?;
    let logp = g.log_softmax(row, 1)?;
    let picked = g.pick(logp, &[label])?;
    Ok(g.neg(picked))
}

/// Model outputs for one sample.
#[derive(Clone, Debug, Default)]
pub struct SamplePredictions {
    /// Downstream logits `[C]`.
    pub logits: Option<Var>,
    pub tasks: BTreeMap<Task, Var>,
}

/// One term of the total: its unweighted mean over carriers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermReport {
    pub value: f64,
    pub count: usize,
    pub weight: f64,
}

impl TermReport {
    /// `weight · value`, the term's share of the total.
    pub fn contribution(&self) -> f64 {
        self.weight * self.value
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub dt: Option<TermReport>,
    pub tasks: BTreeMap<Task, TermReport>,
    pub total: f64,
    /// Scalar node of the total, for backward.
    pub loss: Var,
}

impl LossReport {
    pub fn task(&self, task: Task) -> Option<&TermReport> {
        self.tasks.get(&task)
    }
}

fn task_loss(g: &mut Graph, task: Task, pred: Var, ann: &AnnotationSet, cfg: &LossConfig) -> Result<Option<Var>> {
    Ok(Some(match task {
        Task::Depth => match &ann.depth {
            Some(gt) => depth_loss(g, pred, gt, cfg.depth_clip)?,
            None => return Ok(None),
        },
        Task::Normal => match &ann.normal {
            Some(gt) => normal_loss(g, pred, gt)?,
            None => return Ok(None),
        },
        Task::Segm => match &ann.segm {
            Some(gt) => segm_loss(g, pred, gt)?,
            None => return Ok(None),
        },
        Task::Pose => match &ann.pose {
            Some(gt) => pose_loss(g, pred, gt)?,
            None => return Ok(None),
        },
        Task::Boxes => match &ann.boxes {
            Some(gt) => box_loss(g, pred, gt)?,
            None => return Ok(None),
        },
    }))
}

fn masked_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// λ-weighted sum of per-task means, each averaged only over the samples
/// that carry that task's labels.
pub fn total_loss(
    g: &mut Graph,
    predictions: &[SamplePredictions],
    annotations: &[&AnnotationSet],
    config: &LossConfig,
) -> Result<LossReport> {
    if predictions.is_empty() || predictions.len() != annotations.len() {
        return Err(LossError::EmptyBatch);
    }
    let missing = |sample: usize, task: &str| LossError::MissingPrediction {
        sample,
        task: task.to_string(),
    };
    let mut dt_terms = Vec::new();
    let mut task_terms: BTreeMap<Task, Vec<Var>> = BTreeMap::new();
    for (i, (pred, ann)) in predictions.iter().zip(annotations).enumerate() {
        if let Some(label) = ann.action {
            let logits = pred.logits.ok_or_else(|| missing(i, "action"))?;
            dt_terms.push(downstream_loss(g, logits, label)?);
        }
        for task in Task::ALL {
            if !ann.has(task) {
                continue;
            }
            let p = *pred.tasks.get(&task).ok_or_else(|| missing(i, task.name()))?;
            let l = task_loss(g, task, p, ann, config)?.expect("annotation present");
            task_terms.entry(task).or_default().push(l);
        }
    }

    let w = &config.weights;
    let mut weighted = Vec::new();
    let dt = if dt_terms.is_empty() {
        None
    } else {
        let mean = masked_mean(g, &dt_terms)?;
        weighted.push(g.scale(mean, w.dt));
        Some(TermReport {
            value: g.value(mean).item()?,
            count: dt_terms.len(),
            weight: w.dt,
        })
    };
    let mut tasks = BTreeMap::new();
    for (task, terms) in &task_terms {
        let mean = masked_mean(g, terms)?;
        weighted.push(g.scale(mean, w.task(*task)));
        tasks.insert(
            *task,
            TermReport {
                value: g.value(mean).item()?,
                count: terms.len(),
                weight: w.task(*task),
            },
        );
    }
    if weighted.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut loss = weighted[0];
    for &t in &weighted[1..] {
        loss = g.add(loss, t)?;
    }
    Ok(LossReport {
        dt,
        tasks,
        total: g.value(loss).item()?,
        loss,
    })
}

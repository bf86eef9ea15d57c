use std::collections::BTreeMap;
use std::fmt::Write;

use crate::codec::{DecodeResult, Decoder, Encoder};
use crate::task::Task;

pub const CSV_HEADER: &str =
    "epoch,lr,loss_total,loss_dt,loss_depth,loss_normal,loss_segm,loss_pose,loss_boxes,train_acc,val_acc";

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dt: Option<f64>,
    pub task_losses: BTreeMap<Task, f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in history {
        let tasks = Task::ALL.map(|t| cell(m.task_losses.get(&t).copied()));
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.loss_total,
            cell(m.loss_dt),
            tasks.join(","),
            cell(m.train_acc),
            cell(m.val_acc)
        )
        .expect("writing to a string");
    }
    out
}

/// Running sums over the steps of the current epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochAccumulator {
    pub steps: usize,
    pub first_lr: Option<f64>,
    pub loss_total: f64,
    pub dt: (f64, usize),
    pub tasks: BTreeMap<Task, (f64, usize)>,
    pub correct: usize,
    pub seen: usize,
}

impl EpochAccumulator {
    pub fn finish(&self, epoch: usize, val_acc: Option<f64>) -> EpochMetrics {
        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        EpochMetrics {
            epoch,
            lr: self.first_lr.unwrap_or(0.0),
            loss_total: self.loss_total / self.steps.max(1) as f64,
            loss_dt: mean(self.dt),
            task_losses: self
                .tasks
                .iter()
                .filter_map(|(t, &acc)| mean(acc).map(|m| (*t, m)))
                .collect(),
            train_acc: (self.seen > 0).then(|| self.correct as f64 / self.seen as f64),
            val_acc,
        }
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.u64(self.steps as u64);
        e.optional(self.first_lr.as_ref(), |e, v| e.f64(*v));
        e.f64(self.loss_total);
        e.f64(self.dt.0);
        e.u64(self.dt.1 as u64);
        e.u64(self.tasks.len() as u64);
        for (t, (sum, n)) in &self.tasks {
            e.u8(t.index() as u8);
            e.f64(*sum);
            e.u64(*n as u64);
        }
        e.u64(self.correct as u64);
        e.u64(self.seen as u64);
    }

    pub(crate) fn decode(d: &mut Decoder) -> DecodeResult<Self> {
        let steps = d.usize()?;
        let first_lr = d.optional(Decoder::f64)?;
        let loss_total = d.f64()?;
        let dt = (d.f64()?, d.usize()?);
        let n = d.usize()?;
        let mut tasks = BTreeMap::new();
        for _ in 0..n {
            let t = decode_task(d)?;
            tasks.insert(t, (d.f64()?, d.usize()?));
        }
        Ok(Self {
            steps,
            first_lr,
            loss_total,
            dt,
            tasks,
            correct: d.usize()?,
            seen: d.usize()?,
        })
    }
}

fn decode_task(d: &mut Decoder) -> DecodeResult<Task> {
    let i = d.u8()? as usize;
    Task::ALL.get(i).copied().ok_or_else(|| format!("bad task index {i}"))
}

impl EpochMetrics {
    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.u64(self.epoch as u64);
        e.f64(self.lr);
        e.f64(self.loss_total);
        e.optional(self.loss_dt.as_ref(), |e, v| e.f64(*v));
        e.u64(self.task_losses.len() as u64);
        for (t, v) in &self.task_losses {
            e.u8(t.index() as u8);
            e.f64(*v);
        }
        e.optional(self.train_acc.as_ref(), |e, v| e.f64(*v));
        e.optional(self.val_acc.as_ref(), |e, v| e.f64(*v));
    }

    pub(crate) fn decode(d: &mut Decoder) -> DecodeResult<Self> {
        let epoch = d.usize()?;
        let lr = d.f64()?;
        let loss_total = d.f64()?;
        let loss_dt = d.optional(Decoder::f64)?;
        let n = d.usize()?;
        let mut task_losses = BTreeMap::new();
        for _ in 0..n {
            let t = decode_task(d)?;
            task_losses.insert(t, d.f64()?);
        }
        Ok(Self {
            epoch,
            lr,
            loss_total,
            loss_dt,
            task_losses,
            train_acc: d.optional(Decoder::f64)?,
            val_acc: d.optional(Decoder::f64)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_values_are_empty_cells() {
        let row = EpochMetrics {
            epoch: 1,
            lr: 0.001,
            loss_total: 2.5,
            loss_dt: Some(2.0),
            task_losses: [(Task::Pose, 0.25)].into_iter().collect(),
            train_acc: Some(0.5),
            val_acc: None,
        };
        let csv = metrics_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "1,0.001,2.5,2,,,,0.25,,0.5,");
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
    }
}

//! Mixed real/synthetic batches, Adam with cosine decay, the epoch loop and
//! resumable checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use metrics::{metrics_csv, EpochAccumulator, EpochMetrics, CSV_HEADER};
pub use optim::{cosine_lr, Adam, AdamConfig, Moments};

use crate::error::{ConfigError, Error, Result};
use crate::losses::{total_loss, LossConfig, SamplePredictions};
use crate::model::{argmax, PvitModel};
use crate::scenegen::{AnnotationSet, Origin, TaskSet, VideoSample};
use crate::task::Task;
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Synthetic videos per real video in a batch, at most 3.
    pub synth_ratio: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Task subsets a synthetic sample may be labeled with, drawn uniformly.
    pub task_pool: Vec<Vec<Task>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            synth_ratio: 1.0,
            epochs: 10,
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            freeze_backbone: false,
            task_pool: vec![Task::ALL.to_vec()],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("trainer.batch_size and trainer.epochs must be positive".into());
        }
        if !(0.0..=3.0).contains(&self.synth_ratio) {
            return fail(format!("trainer.synth_ratio {} is outside [0, 3]", self.synth_ratio));
        }
        if !(self.base_lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return fail("trainer.base_lr, eps and weight_decay must be nonnegative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.task_pool.is_empty() || self.task_pool.iter().any(Vec::is_empty) {
            return fail("trainer.task_pool needs at least one nonempty task set".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn synthetic_per_batch(&self) -> usize {
        synthetic_count(self.batch_size, self.synth_ratio)
    }

    pub fn real_per_batch(&self) -> usize {
        self.batch_size - self.synthetic_per_batch()
    }
}

/// `floor(batch_size · ratio / (1 + ratio))`.
pub fn synthetic_count(batch_size: usize, ratio: f64) -> usize {
    // the tolerance keeps exact rationals such as 1/3 from rounding down
    ((batch_size as f64 * ratio / (1.0 + ratio)) + 1e-9).floor() as usize
}

/// Training samples: the real stream defines an epoch, the synthetic pool is
/// sampled with replacement.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub real: &'a [VideoSample],
    pub synthetic: &'a [VideoSample],
    pub val: &'a [VideoSample],
}

/// Order of the real samples in `epoch`; a pure function of its arguments.
pub fn epoch_permutation(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// One labeled member of a batch.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub sample: &'a VideoSample,
    pub annotations: AnnotationSet,
}

/// Top-1 accuracy of the inference path.
pub fn accuracy(model: &PvitModel, samples: &[VideoSample]) -> Result<Option<f64>> {
    let mut correct = 0;
    let mut seen = 0;
    for s in samples {
        if let Some(label) = s.annotations.action {
            seen += 1;
            correct += usize::from(model.predict_class(&s.pixels)? == label);
        }
    }
    Ok((seen > 0).then(|| correct as f64 / seen as f64))
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub real: usize,
    pub synthetic: usize,
}

pub struct Trainer<'a> {
    model: PvitModel,
    config: TrainConfig,
    losses: LossConfig,
    data: TrainData<'a>,
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    cursor: usize,
    history: Vec<EpochMetrics>,
    acc: EpochAccumulator,
    order: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: PvitModel, config: TrainConfig, losses: LossConfig, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        losses.validate()?;
        if data.real.is_empty() {
            return Err(Error::Train("the real training set is empty".into()));
        }
        if config.synthetic_per_batch() > 0 && data.synthetic.is_empty() {
            return Err(Error::Train("synth_ratio > 0 needs a synthetic pool".into()));
        }
        let optimizer = Adam::new(config.adam(), model.params().len());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            losses,
            data,
            optimizer,
            rng,
            step: 0,
            epoch: 0,
            cursor: 0,
            history: Vec::new(),
            acc: EpochAccumulator::default(),
            order: None,
        })
    }

    pub fn model(&self) -> &PvitModel {
        &self.model
    }

    pub fn into_model(self) -> PvitModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.real.len().div_ceil(self.config.real_per_batch())
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Digest of everything that must match for a checkpoint to resume.
    pub fn run_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.losses).expect("config serializes"));
        h.update(serde_json::to_vec(self.model.spec()).expect("config serializes"));
        h.update(self.model.params().seed().to_le_bytes());
        h.update((self.data.real.len() as u64).to_le_bytes());
        h.update((self.data.synthetic.len() as u64).to_le_bytes());
        h.finalize().into()
    }

    /// Draws the next batch: real samples in epoch order, then synthetic
    /// samples with their task masks. Advances the synthetic stream.
    pub fn make_batch(&mut self) -> Vec<BatchItem<'a>> {
        let n_real = self.data.real.len();
        if self.order.as_ref().is_none_or(|(e, _)| *e != self.epoch) {
            self.order = Some((self.epoch, epoch_permutation(self.config.seed, self.epoch, n_real)));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let end = (self.cursor + self.config.real_per_batch()).min(n_real);
        let model_tasks: TaskSet = self.model.tasks().collect();
        let mut batch: Vec<BatchItem<'a>> = order[self.cursor..end]
            .iter()
            .map(|&i| {
                let sample = &self.data.real[i];
                let mut annotations = sample.annotations.clone();
                annotations.retain(&model_tasks);
                BatchItem { sample, annotations }
            })
            .collect();
        for _ in 0..self.config.synthetic_per_batch() {
            let sample = &self.data.synthetic[self.rng.gen_range(0..self.data.synthetic.len())];
            let mask = &self.config.task_pool[self.rng.gen_range(0..self.config.task_pool.len())];
            let keep: TaskSet = mask.iter().copied().filter(|t| model_tasks.contains(t)).collect();
            let mut annotations = sample.annotations.clone();
            annotations.retain(&keep);
            annotations.action = None;
            batch.push(BatchItem { sample, annotations });
        }
        batch
    }

    /// One optimizer step; closes the epoch when the real stream runs out.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::Train("training already finished".into()));
        }
        let batch = self.make_batch();
        let real = batch.iter().filter(|b| b.sample.origin == Origin::Real).count();
        let lr = cosine_lr(self.step, self.total_steps(), self.config.base_lr);

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, self.config.freeze_backbone);
        let mut predictions: Vec<SamplePredictions> = Vec::with_capacity(batch.len());
        let mut supervised = Vec::with_capacity(batch.len());
        for item in &batch {
            let tasks = item.annotations.tasks();
            if tasks.is_empty() && item.annotations.action.is_none() {
                continue;
            }
            let out = self.model.forward(&mut g, &bound, &item.sample.pixels, tasks)?;
            if let (Some(label), Some(logits)) = (item.annotations.action, out.predictions.logits) {
                self.acc.seen += 1;
                self.acc.correct += usize::from(argmax(g.value(logits).data()) == label);
            }
            predictions.push(out.predictions);
            supervised.push(&item.annotations);
        }
        let report = total_loss(&mut g, &predictions, &supervised, &self.losses)?;
        g.backward(report.loss)?;
        let grads: Vec<_> = bound
            .vars()
            .iter()
            .map(|&v| if g.requires_grad(v) { g.grad(v).cloned() } else { None })
            .collect();
        drop(g);
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;

        self.acc.steps += 1;
        self.acc.first_lr.get_or_insert(lr);
        self.acc.loss_total += report.total;
        if let Some(dt) = report.dt {
            self.acc.dt.0 += dt.value;
            self.acc.dt.1 += 1;
        }
        for (task, term) in &report.tasks {
            let e = self.acc.tasks.entry(*task).or_default();
            e.0 += term.value;
            e.1 += 1;
        }
        let out = StepReport {
            step: self.step,
            lr,
            loss: report.total,
            real,
            synthetic: batch.len() - real,
        };
        self.step += 1;
        self.cursor += real;
        if self.cursor >= self.data.real.len() {
            self.close_epoch()?;
        }
        Ok(out)
    }

    fn close_epoch(&mut self) -> Result<()> {
        let val = accuracy(&self.model, self.data.val)?;
        self.history.push(self.acc.finish(self.epoch + 1, val));
        self.acc = EpochAccumulator::default();
        self.epoch += 1;
        self.cursor = 0;
        Ok(())
    }

    /// Finishes the current epoch.
    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let epoch = self.epoch;
        while self.epoch == epoch && !self.is_finished() {
            self.step()?;
        }
        self.history
            .last()
            .ok_or_else(|| Error::Train("no epoch completed".into()))
    }

    /// Runs to the configured number of epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            digest: self.run_digest(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            params: self
                .model
                .params()
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            moments: self.optimizer.moments.clone(),
            history: self.history.clone(),
            accumulator: self.acc.clone(),
        }
    }

    /// Continues a run from `checkpoint`; the model must be built from the
    /// same spec and seed.
    pub fn resume(
        model: PvitModel,
        config: TrainConfig,
        losses: LossConfig,
        data: TrainData<'a>,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(model, config, losses, data)?;
        if checkpoint.digest != t.run_digest() {
            return Err(Error::Checkpoint(
                "checkpoint belongs to a different run configuration".into(),
            ));
        }
        let params = t.model.params_mut();
        if checkpoint.params.len() != params.len() || checkpoint.moments.len() != params.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for ((_, p), (name, value)) in params.iter_mut().zip(&checkpoint.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` does not match `{}`",
                    p.name
                )));
            }
            p.value = value.clone();
        }
        t.optimizer.moments = checkpoint.moments.clone();
        t.rng = ChaCha8Rng::from_seed(checkpoint.rng_seed);
        t.rng.set_stream(checkpoint.rng_stream);
        t.rng.set_word_pos(checkpoint.rng_word_pos);
        t.step = checkpoint.step;
        t.epoch = checkpoint.epoch;
        t.cursor = checkpoint.cursor;
        t.history = checkpoint.history.clone();
        t.acc = checkpoint.accumulator.clone();
        Ok(t)
    }
}

//! Variant factory, evaluation, accounting and the ablation runner.

mod variant;

use std::borrow::Cow;
use std::fmt::Write;

use serde::Serialize;

pub use variant::{build_variant, VariantKind, VariantPlan, VariantSpec};

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::PvitModel;
use crate::params::{Census, CensusMode};
use crate::scenegen::{shuffle_annotations, Dataset, Origin, TaskSet, VideoSample};
use crate::task::Task;
use crate::trainer::{EpochMetrics, TrainData, Trainer};

/// Real training, validation and synthetic samples for one suite.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub real: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub synthetic: Vec<VideoSample>,
}

const VAL_OFFSET: u64 = 1 << 40;
const SYNTH_OFFSET: u64 = 2 << 40;

impl Corpus {
    /// Sample seeds are disjoint across the three splits.
    pub fn generate(config: &RunConfig) -> Result<Self> {
        let scene = config.data.scene(&config.backbone);
        let base = config.data.seed.wrapping_mul(3 << 40);
        let all: TaskSet = Task::ALL.into_iter().collect();
        let none = TaskSet::new();
        Ok(Self {
            real: Dataset::generate(&scene, base, config.data.real_train, Origin::Real, &none)?.samples,
            val: Dataset::generate(&scene, base + VAL_OFFSET, config.data.val, Origin::Real, &none)?.samples,
            synthetic: Dataset::generate(
                &scene,
                base + SYNTH_OFFSET,
                config.data.synthetic,
                Origin::Synthetic,
                &all,
            )?
            .samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    pub samples: usize,
    pub train_census: Census,
    pub inference_census: Census,
    pub inference_macs: u64,
    pub training_macs: u64,
}

/// Top-1 accuracy over the labeled samples, using only the CLS path.
pub fn evaluate(model: &PvitModel, samples: &[VideoSample]) -> Result<EvalReport> {
    let classes = model.spec().backbone.downstream_classes;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for s in samples {
        let Some(label) = s.annotations.action else { continue };
        totals[label] += 1;
        hits[label] += usize::from(model.predict_class(&s.pixels)? == label);
    }
    let seen: usize = totals.iter().sum();
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / seen.max(1) as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        samples: seen,
        train_census: count_params(model, CensusMode::Train),
        inference_census: count_params(model, CensusMode::Inference),
        inference_macs: model.inference_macs(),
        training_macs: model.training_macs(),
    })
}

pub fn count_params(model: &PvitModel, mode: CensusMode) -> Census {
    model.census(mode)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: PvitModel,
    pub history: Vec<EpochMetrics>,
    pub eval: EvalReport,
}

/// Synthetic samples `plan` trains on: none, the pool, or the pool with its
/// annotations shuffled by `seed`.
pub fn synthetic_pool<'a>(plan: &VariantPlan, corpus: &'a Corpus, seed: u64) -> Cow<'a, [VideoSample]> {
    if !plan.uses_synthetic {
        Cow::Borrowed(&[])
    } else if plan.shuffle_annotations {
        let mut pool = corpus.synthetic.clone();
        shuffle_annotations(&mut pool, seed);
        Cow::Owned(pool)
    } else {
        Cow::Borrowed(&corpus.synthetic)
    }
}

/// Trains `spec` on `corpus` with `seed` and evaluates on the validation split.
pub fn run_variant(spec: &VariantSpec, base: &RunConfig, corpus: &Corpus, seed: u64) -> Result<RunOutcome> {
    let plan = build_variant(spec, base, seed)?;
    let synthetic = synthetic_pool(&plan, corpus, seed);
    let data = TrainData {
        real: &corpus.real,
        synthetic: &synthetic,
        val: &corpus.val,
    };
    let mut trainer = Trainer::new(plan.model, plan.train, base.losses.clone(), data)?;
    trainer.run()?;
    let history = trainer.history().to_vec();
    let model = trainer.into_model();
    let eval = evaluate(&model, &corpus.val)?;
    Ok(RunOutcome { model, history, eval })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: VariantKind,
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn sd(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: VariantKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Difference of mean accuracies, `a − b`.
    pub fn gap(&self, a: VariantKind, b: VariantKind) -> Option<f64> {
        Some(self.row(a)?.mean() - self.row(b)?.mean())
    }

    /// One row per variant: mean, sample sd, gap to the baseline mean when
    /// the suite has one, then one accuracy column per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean_acc,sd_acc,gap_vs_baseline");
        for s in &self.seeds {
            write!(out, ",seed_{s}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            let gap = self
                .gap(r.variant, VariantKind::Baseline)
                .map(|g| g.to_string())
                .unwrap_or_default();
            write!(out, "{},{},{},{}", r.variant, r.mean(), r.sd(), gap).expect("string write");
            for a in &r.accuracies {
                write!(out, ",{a}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every variant once per seed on a shared corpus; seeds are paired
/// across variants.
pub fn run_ablation(
    variants: &[VariantKind],
    seeds: &[u64],
    base: &RunConfig,
    corpus: &Corpus,
    mut progress: impl FnMut(VariantKind, u64, &RunOutcome),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_variant(&VariantSpec::of(variant), base, corpus, seed)?;
            accuracies.push(outcome.eval.accuracy);
            progress(variant, seed, &outcome);
        }
        rows.push(AblationRow { variant, accuracies });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

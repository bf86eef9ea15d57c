use pvit_core::harness::{build_variant, run_variant, Corpus, VariantKind, VariantSpec};
use pvit_core::trainer::{cosine_lr, metrics_csv, CSV_HEADER};
use pvit_core::*;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.embed_dim = 16;
    c.backbone.layers = 2;
    c.backbone.heads = 2;
    c.backbone.tap_layers = vec![1, 2];
    c.trainer.batch_size = 4;
    c.trainer.epochs = 2;
    c.data.real_train = 10;
    c.data.val = 8;
    c.data.synthetic = 12;
    c
}

fn data(corpus: &Corpus) -> TrainData<'_> {
    TrainData {
        real: &corpus.real,
        synthetic: &corpus.synthetic,
        val: &corpus.val,
    }
}

fn trainer<'a>(cfg: &RunConfig, corpus: &'a Corpus, seed: u64) -> Trainer<'a> {
    let plan = build_variant(&VariantSpec::of(VariantKind::Pvit), cfg, seed).unwrap();
    Trainer::new(plan.model, plan.train, cfg.losses.clone(), data(corpus)).unwrap()
}

#[test]
fn batches_follow_the_ratio() {
    let mut cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    for (ratio, synthetic) in [(3.0, 6), (0.0, 0), (1.0, 4)] {
        cfg.trainer.batch_size = 8;
        cfg.trainer.synth_ratio = ratio;
        let mut t = trainer(&cfg, &corpus, 0);
        let batch = t.make_batch();
        let synth = batch.iter().filter(|b| b.sample.origin == Origin::Synthetic).count();
        assert_eq!(
            (synth, batch.len() - synth),
            (synthetic, 8 - synthetic),
            "ratio {ratio}"
        );
        for b in &batch {
            match b.sample.origin {
                Origin::Real => assert!(b.annotations.action.is_some() && b.annotations.tasks().is_empty()),
                Origin::Synthetic => assert!(b.annotations.action.is_none() && !b.annotations.tasks().is_empty()),
            }
        }
    }
}

#[test]
fn synthetic_masks_come_from_the_pool() {
    let mut cfg = tiny();
    cfg.trainer.task_pool = vec![vec![Task::Boxes], vec![Task::Depth, Task::Pose]];
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut t = trainer(&cfg, &corpus, 3);
    let allowed: Vec<TaskSet> = cfg
        .trainer
        .task_pool
        .iter()
        .map(|m| m.iter().copied().collect())
        .collect();
    for _ in 0..5 {
        for b in t.make_batch().iter().filter(|b| b.sample.origin == Origin::Synthetic) {
            assert!(allowed.contains(&b.annotations.tasks()));
        }
    }
    assert_eq!(
        t.model().tasks().collect::<Vec<_>>(),
        vec![Task::Depth, Task::Pose, Task::Boxes]
    );
}

#[test]
fn learning_rate_ignores_batch_composition() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut a = trainer(&cfg, &corpus, 0);
    let plan = build_variant(&VariantSpec::of(VariantKind::Baseline), &cfg, 0).unwrap();
    let mut b = Trainer::new(plan.model, plan.train, cfg.losses.clone(), data(&corpus)).unwrap();
    assert_eq!(a.total_steps(), b.total_steps());
    while !a.is_finished() {
        let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(ra.lr, rb.lr);
        assert_eq!(ra.lr, cosine_lr(ra.step, a.total_steps(), cfg.trainer.base_lr));
        assert_eq!(ra.real, rb.real);
    }
    assert!(b.is_finished());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let run = || {
        let mut t = trainer(&cfg, &corpus, 11);
        t.run().unwrap();
        metrics_csv(t.history())
    };
    let first = run();
    assert_eq!(first.as_bytes(), run().as_bytes());
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + cfg.trainer.epochs);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut full = trainer(&cfg, &corpus, 5);
    full.run().unwrap();

    let mut first = trainer(&cfg, &corpus, 5);
    let cut = first.steps_per_epoch() + 1;
    for _ in 0..cut {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt, first.checkpoint());

    let plan = build_variant(&VariantSpec::of(VariantKind::Pvit), &cfg, 5).unwrap();
    let mut resumed = Trainer::resume(plan.model, plan.train, cfg.losses.clone(), data(&corpus), &ckpt).unwrap();
    assert_eq!(resumed.step_index(), cut);
    resumed.run().unwrap();
    assert_eq!(metrics_csv(resumed.history()), metrics_csv(full.history()));
    assert_eq!(resumed.model().params(), full.model().params());
}

#[test]
fn resume_rejects_a_different_run() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut t = trainer(&cfg, &corpus, 5);
    t.step().unwrap();
    let ckpt = t.checkpoint();
    let mut other = cfg.clone();
    other.trainer.base_lr = 2e-3;
    let plan = build_variant(&VariantSpec::of(VariantKind::Pvit), &other, 5).unwrap();
    assert!(Trainer::resume(plan.model, plan.train, other.losses.clone(), data(&corpus), &ckpt).is_err());
    let mut bytes = ckpt.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn loss_falls_over_the_first_fifty_steps() {
    let mut cfg = RunConfig::default();
    cfg.data.real_train = 200;
    cfg.data.val = 0;
    cfg.data.synthetic = 200;
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut t = trainer(&cfg, &corpus, 0);
    let losses: Vec<f64> = (0..50).map(|_| t.step().unwrap().loss).collect();
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn evaluation_is_deterministic_and_head_free() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut t = trainer(&cfg, &corpus, 2);
    t.run_epoch().unwrap();
    let mut model = t.into_model();
    let report = evaluate(&model, &corpus.val).unwrap();
    assert_eq!(report, evaluate(&model, &corpus.val).unwrap());
    assert_eq!(report.samples, corpus.val.len());
    model.strip_task_heads();
    let stripped = evaluate(&model, &corpus.val).unwrap();
    assert_eq!(stripped.accuracy, report.accuracy);
    assert_eq!(stripped.per_class, report.per_class);
    assert_eq!(stripped.inference_census, report.inference_census);
}

#[test]
fn untrained_model_is_near_chance() {
    let mut cfg = tiny();
    cfg.data.val = 400;
    let corpus = Corpus::generate(&cfg).unwrap();
    let model = build_variant(&VariantSpec::of(VariantKind::Baseline), &cfg, 0)
        .unwrap()
        .model;
    let acc = evaluate(&model, &corpus.val).unwrap().accuracy;
    // within four binomial standard deviations of 1/8 at n = 400
    assert!((acc - 0.125).abs() < 4.0 * (0.125f64 * 0.875 / 400.0).sqrt(), "{acc}");
}

#[test]
fn shuffled_runs_are_reproducible() {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg).unwrap();
    let spec = VariantSpec::of(VariantKind::Shuffled);
    let a = run_variant(&spec, &cfg, &corpus, 3).unwrap();
    let b = run_variant(&spec, &cfg, &corpus, 3).unwrap();
    assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    assert_eq!(a.eval, b.eval);
}

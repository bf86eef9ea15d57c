//! Shared fixtures for the criterion benches.

use pvit_core::harness::{build_variant, VariantKind, VariantSpec};
use pvit_core::scenegen::generate_sample;
use pvit_core::{Origin, PvitModel, RunConfig, Task, TaskSet, VideoSample};

/// Toy configuration with a shallower backbone so one iteration stays short.
pub fn config() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.layers = 4;
    c.backbone.tap_layers = vec![1, 4];
    c
}

pub fn model(kind: VariantKind) -> PvitModel {
    build_variant(&VariantSpec::of(kind), &config(), 0)
        .expect("toy variant")
        .model
}

/// `count` samples carrying every auxiliary label plus the action label.
pub fn labeled(count: u64) -> Vec<VideoSample> {
    let c = config();
    let scene = c.data.scene(&c.backbone);
    let all: TaskSet = Task::ALL.into_iter().collect();
    (0..count)
        .map(|s| generate_sample(&scene, s, Origin::Real, &all).expect("sample"))
        .collect()
}

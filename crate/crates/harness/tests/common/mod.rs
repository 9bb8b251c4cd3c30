#![allow(dead_code)]

use std::fs;
use std::path::Path;

use slpt_harness::config::{Primitive, TrainingConfig};
use slpt_harness::scene::generate_scene;
use slpt_harness::Dataset;

/// A scene and model small enough for a few optimisation steps per test.
pub fn small_config() -> TrainingConfig {
    let mut cfg = TrainingConfig::default();
    cfg.scene.n_points = 400;
    cfg.scene.image_size = 24;
    cfg.scene.seed = 5;
    cfg.model.codec.m_sparse = 32;
    cfg.model.codec.k_group = 8;
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    cfg
}

pub fn single_object(kind: Primitive) -> TrainingConfig {
    let mut cfg = small_config();
    cfg.scene.objects = vec![kind];
    cfg
}

pub fn dataset(cfg: &TrainingConfig) -> Dataset {
    let scene = generate_scene(&cfg.scene).unwrap();
    Dataset::from_scene(&scene, &cfg.scene).unwrap()
}

/// Sorted `(file name, bytes)` of every file in `dir`.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

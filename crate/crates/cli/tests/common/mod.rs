//! Small trained fixture shared by the API and CLI tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cbx::session::Session;
use cbx_core::cbm::{init_model, train, CbmModel, Regime, TrainConfig};
use cbx_core::io::{save_dataset, save_model};
use cbx_core::synth::{generate_dataset, Dataset, GeneratorConfig};

/// 15 samples at 32×32, so the test split holds 3.
pub fn fixture() -> (CbmModel, Dataset) {
    let data = generate_dataset(&GeneratorConfig {
        height: 32,
        width: 32,
        samples: 15,
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let c = &data.config;
    let mut model = init_model(
        &[3, c.height, c.width],
        c.concept_names(),
        c.class_names(),
        true,
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        regime: Regime::Sequential,
        epochs: 2,
        class_epochs: 10,
        ..TrainConfig::default()
    };
    train(&mut model, &data.train, &cfg).unwrap();
    (model, data)
}

pub fn session() -> Session {
    let (model, data) = fixture();
    Session::new(model, data, "test").unwrap()
}

/// Writes the fixture to `dir`, returning (model path, dataset dir).
pub fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (model, data) = fixture();
    let model_path = dir.join("model.json");
    let data_dir = dir.join("data");
    save_model(&model, &model_path).unwrap();
    save_dataset(&data, &data_dir).unwrap();
    (model_path, data_dir)
}

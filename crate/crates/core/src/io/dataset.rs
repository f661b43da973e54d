//! Dataset directories: `manifest.json` plus `images.bin`, the images as
//! little-endian `f64` values in record order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::PartKeypoint;
use crate::synth::{class_rule, Dataset, GeneratorConfig, SyntheticSample};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "CBXD1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    split: String,
    class: usize,
    concepts: Vec<u8>,
    keypoints: Vec<PartKeypoint>,
    /// Offset of the image in `images.bin`, counted in `f64` values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    magic: String,
    config: GeneratorConfig,
    concept_names: Vec<String>,
    class_names: Vec<String>,
    part_names: Vec<String>,
    image_shape: Vec<usize>,
    sample_count: usize,
    records: Vec<Record>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let cfg = &dataset.config;
    let shape = vec![3, cfg.height, cfg.width];
    let image_len: usize = shape.iter().product();
    let mut images: Vec<u8> =
        Vec::with_capacity(8 * image_len * (dataset.train.len() + dataset.test.len()));
    if dataset.train.is_empty() && dataset.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::new();
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for s in samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "image {:?} vs config {shape:?}",
                    s.image.shape()
                )));
            }
            records.push(Record {
                split: split.to_string(),
                class: s.class_label,
                concepts: s.concepts.iter().map(|&c| u8::from(c)).collect(),
                keypoints: s.keypoints.clone(),
                offset: images.len() / 8,
            });
            for &v in s.image.data() {
                images.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = DatasetManifest {
        magic: DATASET_MAGIC.to_string(),
        config: cfg.clone(),
        concept_names: cfg.concept_names(),
        class_names: cfg.class_names(),
        part_names: cfg.part_names(),
        image_shape: shape,
        sample_count: records.len(),
        records,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(IMAGES_FILE), images)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Malformed(format!("dataset manifest: {e}")))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(DATASET_MAGIC) => {}
        other => return Err(Error::BadMagic(other.unwrap_or_default().to_string())),
    }
    let m: DatasetManifest = serde_json::from_value(value)
        .map_err(|e| Error::Malformed(format!("dataset manifest: {e}")))?;
    m.config.validate()?;
    if m.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if m.sample_count != m.records.len() {
        return Err(Error::Malformed(format!(
            "sample_count {} but {} records",
            m.sample_count,
            m.records.len()
        )));
    }
    let shape = vec![3, m.config.height, m.config.width];
    if m.image_shape != shape {
        return Err(Error::Malformed(format!(
            "image_shape {:?} vs config {shape:?}",
            m.image_shape
        )));
    }
    let image_len: usize = shape.iter().product();
    let bytes = fs::read(dir.join(IMAGES_FILE))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CorruptOffsets(format!(
            "image blob of {} bytes is not whole f64s",
            bytes.len()
        )));
    }
    let images: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let k = m.config.n_concepts();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in m.records.into_iter().enumerate() {
        let pixels = r
            .offset
            .checked_add(image_len)
            .and_then(|end| images.get(r.offset..end))
            .ok_or_else(|| {
                Error::CorruptOffsets(format!("record {i}: image offset {} past end", r.offset))
            })?;
        if r.concepts.len() != k || r.concepts.iter().any(|&c| c > 1) {
            return Err(Error::Malformed(format!(
                "record {i}: concepts must be {k} zeros/ones"
            )));
        }
        let concepts: Vec<bool> = r.concepts.iter().map(|&c| c == 1).collect();
        if class_rule(&concepts, &m.config) != r.class {
            return Err(Error::Malformed(format!(
                "record {i}: class disagrees with concepts"
            )));
        }
        let image = Tensor::new(shape.clone(), pixels.to_vec())?;
        let sample = SyntheticSample {
            image,
            concepts,
            class_label: r.class,
            keypoints: r.keypoints,
        };
        match r.split.as_str() {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => {
                return Err(Error::Malformed(format!(
                    "record {i}: unknown split {other:?}"
                )))
            }
        }
    }
    Ok(Dataset {
        config: m.config,
        train,
        test,
    })
}

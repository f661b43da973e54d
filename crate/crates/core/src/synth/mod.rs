//! Deterministic synthetic concept datasets with ground-truth part keypoints.
//!
//! Each image shows up to `n_parts` coloured geometric parts (circle "head",
//! square "body", triangle "tail", diamond "wing") on a noisy grey
//! background. Concepts are instance-level: `has_<part>` is true only when the
//! part is drawn, `has_<part>_color::<color>` only when it is drawn in that
//! colour. The class is a fixed lookup over a subset of those concepts.

mod rng;

pub use rng::Rng;

use crate::error::{Error, Result};
use crate::evalkit::PartKeypoint;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const PART_NAMES: [&str; 4] = ["head", "body", "tail", "wing"];

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.12, 0.12],
    [0.12, 0.78, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.90],
];

const BACKGROUND: f64 = 0.55;

/// Probability that any given part is drawn.
pub const PART_PRESENCE: f64 = 0.7;

/// Fraction of samples in the train split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub n_parts: usize,
    pub n_colors: usize,
    pub n_classes: usize,
    /// Total samples across both splits.
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_parts: 3,
            n_colors: 3,
            n_classes: 8,
            samples: 2500,
            seed: 7,
            noise: 0.03,
        }
    }
}

impl GeneratorConfig {
    pub fn n_concepts(&self) -> usize {
        self.n_parts * (1 + self.n_colors)
    }

    /// Number of distinct class-rule inputs (anchor state × modifier presence).
    pub fn realizable_classes(&self) -> usize {
        2 * (self.n_colors + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "image must be at least 16x16, got {}x{}",
                self.height, self.width
            ));
        }
        if !(2..=PART_NAMES.len()).contains(&self.n_parts) {
            return bad(format!(
                "parts must be in 2..={}, got {}",
                PART_NAMES.len(),
                self.n_parts
            ));
        }
        if !(1..=COLOR_NAMES.len()).contains(&self.n_colors) {
            return bad(format!(
                "colors must be in 1..={}, got {}",
                COLOR_NAMES.len(),
                self.n_colors
            ));
        }
        if self.n_classes == 0 || self.n_classes > self.realizable_classes() {
            return bad(format!(
                "classes must be in 1..={}, got {}",
                self.realizable_classes(),
                self.n_classes
            ));
        }
        if self.samples < 2 {
            return bad("need at least 2 samples to split".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.layout().radius < 3.0 {
            return bad("image too small for non-overlapping parts".into());
        }
        Ok(())
    }

    /// Concept index of `has_<part>`.
    pub fn presence_concept(&self, part: usize) -> usize {
        part
    }

    /// Concept index of `has_<part>_color::<color>`.
    pub fn color_concept(&self, part: usize, color: usize) -> usize {
        self.n_parts + part * self.n_colors + color
    }

    /// Part a concept refers to.
    pub fn concept_part(&self, concept: usize) -> usize {
        if concept < self.n_parts {
            concept
        } else {
            (concept - self.n_parts) / self.n_colors
        }
    }

    pub fn part_names(&self) -> Vec<String> {
        PART_NAMES[..self.n_parts]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn concept_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n_parts)
            .map(|p| format!("has_{}", PART_NAMES[p]))
            .collect();
        for p in 0..self.n_parts {
            for c in 0..self.n_colors {
                names.push(format!("has_{}_color::{}", PART_NAMES[p], COLOR_NAMES[c]));
            }
        }
        names
    }

    pub fn class_names(&self) -> Vec<String> {
        let (anchor, modifier) = class_parts(self.n_parts);
        (0..self.n_classes)
            .map(|class| {
                // the first rule input that maps to this class names it
                let state = class / 2;
                let anchor_name = match state {
                    0 => format!("no_{}", PART_NAMES[anchor]),
                    s => format!("{}_{}", COLOR_NAMES[s - 1], PART_NAMES[anchor]),
                };
                let with = if class % 2 == 1 { "with" } else { "without" };
                format!("{anchor_name}_{with}_{}", PART_NAMES[modifier])
            })
            .collect()
    }

    fn layout(&self) -> Layout {
        let cols = (self.n_parts as f64).sqrt().ceil() as usize;
        let rows = self.n_parts.div_ceil(cols);
        let cell_h = self.height as f64 / rows as f64;
        let cell_w = self.width as f64 / cols as f64;
        Layout {
            rows,
            cols,
            cell_h,
            cell_w,
            radius: (0.3 * cell_h.min(cell_w)).floor(),
        }
    }
}

struct Layout {
    rows: usize,
    cols: usize,
    cell_h: f64,
    cell_w: f64,
    radius: f64,
}

/// (anchor part, modifier part) read by the class rule.
fn class_parts(n_parts: usize) -> (usize, usize) {
    if n_parts >= 3 {
        (1, 2)
    } else {
        (1, 0)
    }
}

/// Fixed decision table: the anchor part's state (absent, or its first
/// colour) and whether the modifier part is present select the class
/// `2·state + modifier`, folded modulo `n_classes`. Every other concept is
/// ignored, so several concept vectors share a class; the all-false vector
/// maps to class 0.
pub fn class_rule(concepts: &[bool], config: &GeneratorConfig) -> usize {
    let (anchor, modifier) = class_parts(config.n_parts);
    let state = if concepts.get(config.presence_concept(anchor)) == Some(&true) {
        (0..config.n_colors)
            .find(|&c| concepts.get(config.color_concept(anchor, c)) == Some(&true))
            .map_or(0, |c| c + 1)
    } else {
        0
    };
    let modifier_present = concepts.get(config.presence_concept(modifier)) == Some(&true);
    (2 * state + usize::from(modifier_present)) % config.n_classes
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub concepts: Vec<bool>,
    pub class_label: usize,
    /// One per part, in part order; invisible when the part is absent.
    pub keypoints: Vec<PartKeypoint>,
}

impl SyntheticSample {
    pub fn concept_targets(&self) -> Vec<f64> {
        self.concepts
            .iter()
            .map(|&c| f64::from(u8::from(c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SyntheticSample]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Snaps a value in `[0, 1]` to the nearest `k / 255`, so images are exact
/// 8-bit rasters.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // apex up, base at dy = r
        2 => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn generate_sample(config: &GeneratorConfig, rng: &mut Rng) -> SyntheticSample {
    let layout = config.layout();
    let (h, w) = (config.height, config.width);
    let r = layout.radius;
    let mut cells: Vec<usize> = (0..layout.rows * layout.cols).collect();
    rng.shuffle(&mut cells);

    let mut concepts = vec![false; config.n_concepts()];
    let mut keypoints = Vec::with_capacity(config.n_parts);
    let mut placed = Vec::new();
    for part in 0..config.n_parts {
        let present = rng.bernoulli(PART_PRESENCE);
        let color = rng.below(config.n_colors);
        let cell = cells[part];
        let (cy0, cx0) = (
            (cell / layout.cols) as f64 * layout.cell_h,
            (cell % layout.cols) as f64 * layout.cell_w,
        );
        let cy = (cy0 + rng.uniform_range(r + 1.0, layout.cell_h - r - 1.0)).floor();
        let cx = (cx0 + rng.uniform_range(r + 1.0, layout.cell_w - r - 1.0)).floor();
        keypoints.push(PartKeypoint {
            part_id: part,
            x: cx as usize,
            y: cy as usize,
            visible: present,
        });
        if present {
            concepts[config.presence_concept(part)] = true;
            concepts[config.color_concept(part, color)] = true;
            placed.push((part, cx, cy, color));
        }
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [BACKGROUND; 3];
            for &(part, cx, cy, color) in &placed {
                if inside(part, x as f64 - cx, y as f64 - cy, r) {
                    rgb = PALETTE[color];
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                data[c * plane + y * w + x] = *v;
            }
        }
    }
    if config.noise > 0.0 {
        for v in &mut data {
            *v = (*v + config.noise * rng.gaussian()).clamp(0.0, 1.0);
        }
    }
    for v in &mut data {
        *v = quantize(*v);
    }
    let class_label = class_rule(&concepts, config);
    SyntheticSample {
        image: Tensor::new(vec![3, h, w], data).expect("sized above"),
        concepts,
        class_label,
        keypoints,
    }
}

/// Generates `config.samples` samples from one RNG stream, then splits them
/// 80/20 by a seeded shuffle. The result is a pure function of `config`.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let samples: Vec<SyntheticSample> = (0..config.samples)
        .map(|_| generate_sample(config, &mut rng))
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let n_train = (TRAIN_FRACTION * samples.len() as f64).round() as usize;
    let mut slots: Vec<Option<SyntheticSample>> = samples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let test = order[n_train..].iter().map(&mut take).collect();
    Ok(Dataset {
        config: config.clone(),
        train,
        test,
    })
}

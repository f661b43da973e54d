//! Evaluation: the distance pointing game and concept contribution reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, channel_reduce, AttributionConfig};
use crate::cbm::{CbmModel, ConceptPrediction};
use crate::error::{Error, Result};
use crate::lrp::{default_rule_map, lrp_attribute};
use crate::nn::{fold_batchnorm, forward, Network};
use crate::par;
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;

/// Ground-truth location of one part in pixel coordinates (`x` = column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartKeypoint {
    pub part_id: usize,
    pub x: usize,
    pub y: usize,
    pub visible: bool,
}

/// `(row, col)` of the largest value in a `[H, W]` grid, lowest row-major
/// index on ties.
pub fn most_salient_point(grid: &Tensor) -> Result<(usize, usize)> {
    let &[_, w] = grid.shape() else {
        return Err(Error::Shape(format!(
            "expected [H, W], got {:?}",
            grid.shape()
        )));
    };
    let d = grid.data();
    if d.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    Ok((best / w, best % w))
}

/// Euclidean pixel distance between the most salient point of `grid` and the
/// keypoint.
pub fn pointing_distance(grid: &Tensor, keypoint: &PartKeypoint) -> Result<f64> {
    if !keypoint.visible {
        return Err(Error::NotVisible {
            part_id: keypoint.part_id,
        });
    }
    let &[h, w] = grid.shape() else {
        return Err(Error::Shape(format!(
            "expected [H, W], got {:?}",
            grid.shape()
        )));
    };
    if keypoint.x >= w || keypoint.y >= h {
        return Err(Error::OutOfBounds {
            x: keypoint.x,
            y: keypoint.y,
            height: h,
            width: w,
        });
    }
    let (r, c) = most_salient_point(grid)?;
    let dy = r as f64 - keypoint.y as f64;
    let dx = c as f64 - keypoint.x as f64;
    Ok((dx * dx + dy * dy).sqrt())
}

/// Mean of the smallest `ceil(fraction · n)` distances.
pub fn shortest_fraction_mean(distances: &[f64], fraction: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Empty("no distances"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    // the small slack keeps 0.1 · 30 from rounding up to 4
    let count = ((fraction * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..count].iter().sum::<f64>() / count as f64)
}

/// Aggregate pointing distances for one part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPointing {
    pub part_id: usize,
    pub part_name: String,
    /// Samples where the part was visible and a distance was measured.
    pub n_samples: usize,
    /// Samples skipped because the part was not visible.
    pub n_skipped: usize,
    pub mean_distance: Option<f64>,
    /// Mean over the closest 10 % of samples.
    pub shortest10_mean: Option<f64>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingResult {
    pub method: String,
    pub parts: Vec<PartPointing>,
}

/// Pointing game over precomputed saliency.
///
/// `saliency(sample, concept)` returns the attribution for that concept on
/// that sample (`[C, H, W]` or `[H, W]`); it is only called when the
/// concept's part is visible. Every concept mapped to a part contributes one
/// distance per visible sample.
pub fn pointing_game_with<F>(
    keypoints: &[Vec<PartKeypoint>],
    concept_to_part: &BTreeMap<usize, usize>,
    part_names: &[String],
    method: &str,
    saliency: F,
) -> Result<PointingResult>
where
    F: Fn(usize, usize) -> Result<Tensor> + Sync + Send,
{
    if keypoints.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for &part in concept_to_part.values() {
        if part >= part_names.len() {
            return Err(Error::IndexOutOfRange {
                index: part,
                len: part_names.len(),
            });
        }
    }
    let find = |sample: usize, part: usize| -> Result<&PartKeypoint> {
        keypoints[sample]
            .iter()
            .find(|k| k.part_id == part)
            .ok_or_else(|| {
                Error::Malformed(format!("sample {sample} has no keypoint for part {part}"))
            })
    };
    let sample_ids: Vec<usize> = (0..keypoints.len()).collect();
    // one Option<distance> per (concept, sample), sample-major
    let per_sample = par::try_map(&sample_ids, |&s| {
        concept_to_part
            .iter()
            .map(|(&concept, &part)| {
                let kp = find(s, part)?;
                if !kp.visible {
                    return Ok(None);
                }
                let grid = channel_reduce(&saliency(s, concept)?)?;
                pointing_distance(&grid, kp).map(Some)
            })
            .collect::<Result<Vec<Option<f64>>>>()
    })?;

    let mut by_part: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for row in &per_sample {
        for (&part, d) in concept_to_part.values().zip(row) {
            let entry = by_part.entry(part).or_default();
            match d {
                Some(d) => entry.0.push(*d),
                None => entry.1 += 1,
            }
        }
    }
    let parts = by_part
        .into_iter()
        .map(|(part_id, (distances, n_skipped))| {
            let mean = (!distances.is_empty())
                .then(|| distances.iter().sum::<f64>() / distances.len() as f64);
            let shortest = shortest_fraction_mean(&distances, 0.1).ok();
            PartPointing {
                part_id,
                part_name: part_names[part_id].clone(),
                n_samples: distances.len(),
                n_skipped,
                mean_distance: mean,
                shortest10_mean: shortest,
                distances,
            }
        })
        .collect();
    Ok(PointingResult {
        method: method.to_string(),
        parts,
    })
}

/// Pointing game for the concept network `g` on `samples`, attributing each
/// mapped concept with `config`. `g` is canonized once up front.
pub fn distance_pointing_game(
    samples: &[SyntheticSample],
    g: &Network,
    config: &AttributionConfig,
    concept_to_part: &BTreeMap<usize, usize>,
    part_names: &[String],
) -> Result<PointingResult> {
    let g = if g.first_batchnorm().is_some() {
        fold_batchnorm(g)?
    } else {
        g.clone()
    };
    let keypoints: Vec<Vec<PartKeypoint>> = samples.iter().map(|s| s.keypoints.clone()).collect();
    pointing_game_with(
        &keypoints,
        concept_to_part,
        part_names,
        &config.label(),
        |s, concept| Ok(attribute(&g, &samples[s].image, concept, config)?.values),
    )
}

/// Relevance normalised to percentages of total absolute relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub percent: Vec<f64>,
    /// Every relevance was zero; `percent` is all zeros.
    pub all_zero: bool,
}

/// `100 · |R_i| / Σ_j |R_j|`.
pub fn concept_contributions(relevance: &[f64]) -> Result<Contributions> {
    if relevance.is_empty() {
        return Err(Error::Empty("no concepts"));
    }
    if relevance.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteValue { layer_index: 0 });
    }
    let total: f64 = relevance.iter().map(|r| r.abs()).sum();
    if total == 0.0 {
        return Ok(Contributions {
            percent: vec![0.0; relevance.len()],
            all_zero: true,
        });
    }
    Ok(Contributions {
        percent: relevance.iter().map(|r| 100.0 * r.abs() / total).collect(),
        all_zero: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRow {
    pub concept_id: usize,
    pub concept_name: String,
    /// The bottleneck value `f` saw.
    pub concept_value: f64,
    pub relevance: f64,
    pub contribution_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub target_class: usize,
    pub class_name: String,
    /// Sorted by contribution, descending; ties by concept id.
    pub rows: Vec<ContributionRow>,
    pub all_zero: bool,
}

impl ContributionReport {
    /// `"name at 12.34%, ..."` for the first `n` rows.
    pub fn top_summary(&self, n: usize) -> String {
        self.rows
            .iter()
            .take(n)
            .map(|r| format!("{} at {:.2}%", r.concept_name, r.contribution_percent))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Per-concept LRP relevance of `target_class` through `f`, evaluated at an
/// explicit bottleneck vector.
pub fn class_relevance(
    model: &CbmModel,
    bottleneck: &[f64],
    target_class: usize,
) -> Result<Vec<f64>> {
    let f = if model.f.first_batchnorm().is_some() {
        fold_batchnorm(&model.f)?
    } else {
        model.f.clone()
    };
    let (_, trace) = forward(&f, &Tensor::vector(bottleneck.to_vec()))?;
    let (r, _) = lrp_attribute(&f, &trace, target_class, &default_rule_map(&f))?;
    Ok(r.into_data())
}

/// Contribution report for `target_class` at an explicit bottleneck vector.
pub fn contribution_report_at(
    model: &CbmModel,
    bottleneck: &[f64],
    target_class: usize,
) -> Result<ContributionReport> {
    if target_class >= model.n_classes() {
        return Err(Error::IndexOutOfRange {
            index: target_class,
            len: model.n_classes(),
        });
    }
    let relevance = class_relevance(model, bottleneck, target_class)?;
    let contrib = concept_contributions(&relevance)?;
    let mut rows: Vec<ContributionRow> = relevance
        .iter()
        .zip(&contrib.percent)
        .enumerate()
        .map(|(i, (&r, &p))| ContributionRow {
            concept_id: i,
            concept_name: model.concept_names[i].clone(),
            concept_value: bottleneck[i],
            relevance: r,
            contribution_percent: p,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.contribution_percent
            .total_cmp(&a.contribution_percent)
            .then(a.concept_id.cmp(&b.concept_id))
    });
    Ok(ContributionReport {
        target_class,
        class_name: model.class_names[target_class].clone(),
        rows,
        all_zero: contrib.all_zero,
    })
}

/// Contribution report for a prediction's bottleneck.
pub fn contribution_report(
    model: &CbmModel,
    prediction: &ConceptPrediction,
    target_class: usize,
) -> Result<ContributionReport> {
    contribution_report_at(model, &model.bottleneck(&prediction.logits), target_class)
}

/// Relevance magnitudes below this count as zero in sign patterns.
pub const SIGN_ZERO_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignClass {
    PresentPos,
    PresentNeg,
    AbsentPos,
    AbsentNeg,
    Zero,
}

impl SignClass {
    pub fn of(relevance: f64, present: bool) -> Self {
        if relevance.abs() < SIGN_ZERO_TOLERANCE {
            SignClass::Zero
        } else {
            match (relevance > 0.0, present) {
                (true, true) => SignClass::PresentPos,
                (false, true) => SignClass::PresentNeg,
                (true, false) => SignClass::AbsentPos,
                (false, false) => SignClass::AbsentNeg,
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SignClass::PresentPos => "present_pos",
            SignClass::PresentNeg => "present_neg",
            SignClass::AbsentPos => "absent_pos",
            SignClass::AbsentNeg => "absent_neg",
            SignClass::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SignPattern {
    pub present_pos: usize,
    pub present_neg: usize,
    pub absent_pos: usize,
    pub absent_neg: usize,
    pub zero: usize,
}

/// Counts relevance signs split by predicted presence.
pub fn sign_pattern_summary(relevance: &[f64], presence: &[bool]) -> Result<SignPattern> {
    if relevance.len() != presence.len() {
        return Err(Error::LengthMismatch {
            left: relevance.len(),
            right: presence.len(),
        });
    }
    let mut out = SignPattern::default();
    for (&r, &p) in relevance.iter().zip(presence) {
        match SignClass::of(r, p) {
            SignClass::PresentPos => out.present_pos += 1,
            SignClass::PresentNeg => out.present_neg += 1,
            SignClass::AbsentPos => out.absent_pos += 1,
            SignClass::AbsentNeg => out.absent_neg += 1,
            SignClass::Zero => out.zero += 1,
        }
    }
    Ok(out)
}

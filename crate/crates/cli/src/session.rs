//! Loaded model and dataset plus the per-sample operations shared by the
//! command line and the HTTP service.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cbx_core::attribution::{attribute, channel_reduce, AttributionConfig};
use cbx_core::cbm::{intervene, predict, CbmModel, Intervention, Prediction};
use cbx_core::evalkit::{contribution_report_at, most_salient_point, ContributionReport};
use cbx_core::io::{load_dataset, load_model};
use cbx_core::nn::{fold_batchnorm, Network};
use cbx_core::render::{render_signed_map, Normalization, RgbImage};
use cbx_core::synth::{Dataset, SyntheticSample};
use cbx_core::{Error, Tensor};

/// Pixel size of one segment when a concept vector is drawn as a strip.
pub const SEGMENT_PX: usize = 16;

/// What an attribution explains: one concept logit of `g` or one class
/// logit of `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Concept(usize),
    Class(usize),
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, index) = s
            .split_once(':')
            .ok_or_else(|| format!("target {s:?} is not KIND:INDEX"))?;
        let index: usize = index
            .parse()
            .map_err(|_| format!("target index {index:?} is not a number"))?;
        match kind {
            "concept" => Ok(Target::Concept(index)),
            "class" => Ok(Target::Class(index)),
            other => Err(format!("target kind {other:?} is not concept or class")),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Concept(k) => write!(f, "concept:{k}"),
            Target::Class(k) => write!(f, "class:{k}"),
        }
    }
}

/// A signed attribution with its reduced grid and peak.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// `[3, H, W]` for a concept target, `[k]` for a class target.
    pub values: Tensor,
    /// Positive-part channel sum (`[H, W]`), or the signed relevance as a
    /// single row (`[1, k]`).
    pub reduced: Tensor,
    pub peak: (usize, usize),
}

impl Explanation {
    /// Red/blue heatmap; class targets become a strip of square segments.
    pub fn render(&self) -> RgbImage {
        let img = render_signed_map(&self.values, Normalization::MaxAbs);
        if self.values.rank() == 1 {
            img.upscale(SEGMENT_PX, SEGMENT_PX)
        } else {
            img
        }
    }

    pub fn grid_rows(&self) -> Vec<Vec<f64>> {
        let w = self.reduced.shape()[1];
        self.reduced.data().chunks(w).map(<[f64]>::to_vec).collect()
    }
}

pub struct Session {
    pub model: CbmModel,
    /// `g` with batch-norm folded, for LRP.
    pub g_canonical: Network,
    pub dataset: Dataset,
    pub split: String,
}

impl Session {
    pub fn load(model_path: &Path, data_dir: &Path, split: &str) -> cbx_core::Result<Self> {
        let model = load_model(model_path)?;
        let dataset = load_dataset(data_dir)?;
        Self::new(model, dataset, split)
    }

    pub fn new(model: CbmModel, dataset: Dataset, split: &str) -> cbx_core::Result<Self> {
        dataset.split(split)?;
        let c = &dataset.config;
        let shape = vec![3, c.height, c.width];
        if model.g.input_shape != shape {
            return Err(Error::Malformed(format!(
                "model expects input {:?}, dataset images are {shape:?}",
                model.g.input_shape
            )));
        }
        if model.n_concepts() != c.n_concepts() || model.n_classes() != c.n_classes {
            return Err(Error::Malformed(format!(
                "model has {} concepts / {} classes, dataset has {} / {}",
                model.n_concepts(),
                model.n_classes(),
                c.n_concepts(),
                c.n_classes
            )));
        }
        let g_canonical = match model.g.first_batchnorm() {
            Some(_) => fold_batchnorm(&model.g)?,
            None => model.g.clone(),
        };
        Ok(Self {
            model,
            g_canonical,
            dataset,
            split: split.to_string(),
        })
    }

    pub fn samples(&self) -> &[SyntheticSample] {
        self.dataset.split(&self.split).expect("checked in new")
    }

    pub fn sample(&self, id: usize) -> Option<&SyntheticSample> {
        self.samples().get(id)
    }

    /// `Some(message)` when the target index is out of range.
    pub fn target_error(&self, target: Target) -> Option<String> {
        let (index, len, what) = match target {
            Target::Concept(k) => (k, self.model.n_concepts(), "concept"),
            Target::Class(k) => (k, self.model.n_classes(), "class"),
        };
        (index >= len).then(|| format!("{what} index {index} out of range (0..{len})"))
    }

    pub fn predict(&self, sample: &SyntheticSample) -> cbx_core::Result<Prediction> {
        predict(&self.model, &sample.image)
    }

    pub fn explain(
        &self,
        sample: &SyntheticSample,
        target: Target,
        config: &AttributionConfig,
    ) -> cbx_core::Result<Explanation> {
        match target {
            Target::Concept(k) => {
                let values = attribute(&self.g_canonical, &sample.image, k, config)?.values;
                let reduced = channel_reduce(&values)?;
                let peak = most_salient_point(&reduced)?;
                Ok(Explanation {
                    values,
                    reduced,
                    peak,
                })
            }
            Target::Class(k) => {
                let bottleneck = Tensor::vector(self.predict(sample)?.bottleneck);
                let values = attribute(&self.model.f, &bottleneck, k, config)?.values;
                let reduced = values.reshape(&[1, values.len()])?;
                let peak = most_salient_point(&reduced)?;
                Ok(Explanation {
                    values,
                    reduced,
                    peak,
                })
            }
        }
    }

    /// Contribution report for `class`, or for the predicted class.
    pub fn contributions(
        &self,
        sample: &SyntheticSample,
        class: Option<usize>,
    ) -> cbx_core::Result<ContributionReport> {
        let p = self.predict(sample)?;
        let class = class.unwrap_or_else(|| p.predicted_class());
        contribution_report_at(&self.model, &p.bottleneck, class)
    }

    /// Overrides bottleneck entries and reports the new distribution with
    /// the contributions for `target_class` (default: the new top class).
    pub fn intervene(
        &self,
        sample: &SyntheticSample,
        overrides: &BTreeMap<usize, f64>,
        target_class: Option<usize>,
    ) -> cbx_core::Result<(Intervention, ContributionReport)> {
        let p = self.predict(sample)?;
        let result = intervene(&self.model, &p.bottleneck, overrides)?;
        let class = target_class.unwrap_or_else(|| cbx_core::tensor::argmax(&result.new_probs));
        let report = contribution_report_at(&self.model, &result.values, class)?;
        Ok((result, report))
    }
}

/// The sample image as a binary PPM.
pub fn thumbnail(sample: &SyntheticSample) -> cbx_core::Result<Vec<u8>> {
    Ok(RgbImage::from_tensor(&sample.image)?.to_ppm())
}

//! Concept bottleneck models: `f(g(x))`, where `g` predicts concept logits
//! from the input and `f` predicts the class from the concept vector alone.

mod train;

pub use train::{
    evaluate, train, train_class_net, train_concept_net, EpochRecord, Metrics, Regime, TrainConfig,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{forward, Conv2d, Layer, Linear, MaxPool2d, Network};
use crate::synth::Rng;
use crate::tensor::{argmax, sigmoid, softmax, Tensor};

/// Concept values at or above this are counted as present.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    /// x → c, outputs `k` concept logits.
    pub g: Network,
    /// c → y, outputs one logit per class.
    pub f: Network,
    /// Whether `f` consumes `sigmoid(g(x))` rather than the raw logits.
    pub sigmoid_between: bool,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
}

impl CbmModel {
    pub fn new(
        g: Network,
        f: Network,
        sigmoid_between: bool,
        concept_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let model = Self {
            g,
            f,
            sigmoid_between,
            concept_names,
            class_names,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.g.output_len()?;
        if self.f.input_shape != [k] {
            return Err(Error::Shape(format!(
                "g emits {k} concepts but f expects {:?}",
                self.f.input_shape
            )));
        }
        if self.concept_names.len() != k {
            return Err(Error::LengthMismatch {
                left: self.concept_names.len(),
                right: k,
            });
        }
        let n_classes = self.f.output_len()?;
        if self.class_names.len() != n_classes {
            return Err(Error::LengthMismatch {
                left: self.class_names.len(),
                right: n_classes,
            });
        }
        Ok(())
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The vector handed to `f` for the given concept logits.
    pub fn bottleneck(&self, logits: &[f64]) -> Vec<f64> {
        if self.sigmoid_between {
            logits.iter().map(|&z| sigmoid(z)).collect()
        } else {
            logits.to_vec()
        }
    }

    /// Class logits and probabilities for an explicit bottleneck vector.
    pub fn classify(&self, bottleneck: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (out, _) = forward(&self.f, &Tensor::vector(bottleneck.to_vec()))?;
        let logits = out.into_data();
        let probs = softmax(&logits);
        Ok((logits, probs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPrediction {
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`.
    pub values: Vec<f64>,
    /// `values ≥ 0.5`.
    pub presence: Vec<bool>,
}

impl ConceptPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let values: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let presence = values.iter().map(|&v| v >= PRESENCE_THRESHOLD).collect();
        Self {
            logits,
            values,
            presence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub concepts: ConceptPrediction,
    /// What `f` actually consumed.
    pub bottleneck: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_logits)
    }
}

pub fn predict(model: &CbmModel, x: &Tensor) -> Result<Prediction> {
    let (logits, _) = forward(&model.g, x)?;
    let concepts = ConceptPrediction::from_logits(logits.into_data());
    let bottleneck = model.bottleneck(&concepts.logits);
    let (class_logits, class_probs) = model.classify(&bottleneck)?;
    Ok(Prediction {
        concepts,
        bottleneck,
        class_logits,
        class_probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    /// The bottleneck after overrides.
    pub values: Vec<f64>,
    pub old_probs: Vec<f64>,
    pub new_probs: Vec<f64>,
    /// `new_probs − old_probs`.
    pub delta: Vec<f64>,
}

/// Re-evaluates `f` on `concept_values` (a bottleneck vector) with some
/// entries overridden. `g` is never touched.
pub fn intervene(
    model: &CbmModel,
    concept_values: &[f64],
    overrides: &BTreeMap<usize, f64>,
) -> Result<Intervention> {
    let k = model.n_concepts();
    if concept_values.len() != k {
        return Err(Error::LengthMismatch {
            left: concept_values.len(),
            right: k,
        });
    }
    let mut values = concept_values.to_vec();
    for (&i, &v) in overrides {
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "override for concept {i} is not finite"
            )));
        }
        values[i] = v;
    }
    let (_, old_probs) = model.classify(concept_values)?;
    let (_, new_probs) = model.classify(&values)?;
    let delta = new_probs
        .iter()
        .zip(&old_probs)
        .map(|(n, o)| n - o)
        .collect();
    Ok(Intervention {
        values,
        old_probs,
        new_probs,
        delta,
    })
}

/// Fraction of (sample, concept) cells where `value ≥ 0.5` agrees with the label.
pub fn concept_binary_accuracy(predictions: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut cells = 0usize;
    let mut correct = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: l.len(),
            });
        }
        cells += p.len();
        correct += p
            .iter()
            .zip(l)
            .filter(|(&v, &lab)| (v >= PRESENCE_THRESHOLD) == lab)
            .count();
    }
    if cells == 0 {
        return Err(Error::Empty("no predictions"));
    }
    Ok(correct as f64 / cells as f64)
}

/// Fraction of samples whose argmax (lowest index on ties) equals the label.
pub fn top1_accuracy(class_logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if class_logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: class_logits.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("no predictions"));
    }
    let hits = class_logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `U(−√(6/fan_in), +√(6/fan_in))`.
fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
    )
    .expect("sized above")
}

fn conv(rng: &mut Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Layer> {
    Ok(Layer::Conv2d(Conv2d::new(
        he_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
        Tensor::zeros(&[c_out]),
        (stride, stride),
        (k / 2, k / 2),
    )?))
}

fn dense(rng: &mut Rng, n_in: usize, n_out: usize) -> Result<Layer> {
    Ok(Layer::Linear(Linear::new(
        he_uniform(rng, &[n_out, n_in], n_in),
        Tensor::zeros(&[n_out]),
    )?))
}

/// Default `x → c` convnet for `[3, H, W]` inputs with `H`, `W` multiples of 8:
/// a strided 5×5 conv, two 3×3 convs with 2×2 pooling, global max pooling and
/// one dense layer to `k` concept logits.
pub fn concept_network(input_shape: &[usize], k: usize, rng: &mut Rng) -> Result<Network> {
    let &[c, h, w] = input_shape else {
        return Err(Error::Shape(format!(
            "expected [C, H, W], got {input_shape:?}"
        )));
    };
    if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
        return Err(Error::ConfigInvalid(format!(
            "default concept network needs H and W to be multiples of 8 (>= 16), got {h}x{w}"
        )));
    }
    let (c1, c2, c3) = (12, 24, 32);
    let layers = vec![
        conv(rng, c, c1, 5, 2)?,
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        }),
        conv(rng, c1, c2, 3, 1)?,
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        }),
        conv(rng, c2, c3, 3, 1)?,
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d {
            kernel: (h / 8, w / 8),
            stride: (h / 8, w / 8),
        }),
        Layer::Flatten,
        dense(rng, c3, k)?,
    ];
    Network::new(input_shape.to_vec(), layers)
}

/// Default `c → y` model: a single dense layer.
pub fn class_network(k: usize, n_classes: usize, rng: &mut Rng) -> Result<Network> {
    Network::new(vec![k], vec![dense(rng, k, n_classes)?])
}

/// Freshly initialised model with the default architectures.
pub fn init_model(
    input_shape: &[usize],
    concept_names: Vec<String>,
    class_names: Vec<String>,
    sigmoid_between: bool,
    seed: u64,
) -> Result<CbmModel> {
    let mut rng = Rng::new(seed);
    let g = concept_network(input_shape, concept_names.len(), &mut rng)?;
    let f = class_network(concept_names.len(), class_names.len(), &mut rng)?;
    CbmModel::new(g, f, sigmoid_between, concept_names, class_names)
}

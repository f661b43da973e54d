//! Mini-batch SGD with momentum for the three training regimes.

use serde::{Deserialize, Serialize};

use super::{predict, CbmModel};
use crate::autodiff::{backward, LossSpec};
use crate::error::{Error, Result};
use crate::nn::{forward, Network};
use crate::par;
use crate::synth::{Rng, SyntheticSample};
use crate::tensor::{argmax, sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// `g` on true concepts, `f` on true concepts, separately.
    Independent,
    /// `g` first, then `f` on the frozen `g`'s bottleneck.
    Sequential,
    /// Both at once on `L_y + lambda · L_c`.
    Joint { lambda: f64 },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Independent => "independent",
            Regime::Sequential => "sequential",
            Regime::Joint { .. } => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Epochs over the training set for `g` (and for both nets when joint).
    pub epochs: usize,
    /// Epochs for `f` in the two-stage regimes. `f` is tiny, so it gets more.
    pub class_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Independent,
            epochs: 10,
            class_epochs: 60,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::ConfigInvalid("momentum must be in [0, 1)".into()));
        }
        if let Regime::Joint { lambda } = self.regime {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::ConfigInvalid("lambda must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// One line of training history, computed on the fly from the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// `"concept"`, `"class"` or `"joint"`.
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub concept_accuracy: Option<f64>,
    pub class_accuracy: Option<f64>,
}

type Grads = Vec<Vec<Tensor>>;

struct SampleStep {
    loss: f64,
    /// One gradient set per network being trained.
    grads: Vec<Grads>,
    concept_hits: usize,
    concept_cells: usize,
    class_hit: Option<bool>,
}

struct Sgd {
    velocity: Vec<Grads>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(nets: &[Network], cfg: &TrainConfig) -> Self {
        let velocity = nets
            .iter()
            .map(|n| {
                n.layers
                    .iter()
                    .map(|l| {
                        l.params()
                            .iter()
                            .map(|p| Tensor::zeros(p.shape()))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            velocity,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
        }
    }

    /// `v ← μv + ĝ; θ ← θ − η v`, where `ĝ` is the batch-mean gradient.
    fn step(&mut self, nets: &mut [Network], sum: &[Grads], batch: usize) {
        let inv = 1.0 / batch as f64;
        for ((net, vel), grad) in nets.iter_mut().zip(&mut self.velocity).zip(sum) {
            for ((layer, lv), lg) in net.layers.iter_mut().zip(vel).zip(grad) {
                for ((p, v), g) in layer.params_mut().into_iter().zip(lv).zip(lg) {
                    for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vi = self.momentum * *vi + gi * inv;
                        *pi -= self.lr * *vi;
                    }
                }
            }
        }
    }
}

fn accumulate(acc: &mut Vec<Grads>, grads: Vec<Grads>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (an, gn) in acc.iter_mut().zip(grads) {
        for (al, gl) in an.iter_mut().zip(gn) {
            for (a, g) in al.iter_mut().zip(gl) {
                a.add_assign(&g).expect("same shapes");
            }
        }
    }
}

/// Shared epoch loop. Per-sample gradients are computed in parallel and
/// summed in batch order, so results do not depend on the thread count.
fn run<F>(
    stage: &str,
    nets: &mut [Network],
    n: usize,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
    step: F,
) -> Result<Vec<EpochRecord>>
where
    F: Fn(&[Network], usize) -> Result<SampleStep> + Sync + Send,
{
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sgd = Sgd::new(nets, cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let (mut loss, mut hits, mut cells, mut class_hits, mut class_n) = (0.0, 0, 0, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &[Network] = nets;
            let steps = par::try_map(batch, |&i| step(frozen, i))?;
            let mut sum = Vec::new();
            for s in steps {
                if !s.loss.is_finite() {
                    return Err(Error::NonFiniteValue { layer_index: 0 });
                }
                loss += s.loss;
                hits += s.concept_hits;
                cells += s.concept_cells;
                if let Some(hit) = s.class_hit {
                    class_n += 1;
                    class_hits += usize::from(hit);
                }
                accumulate(&mut sum, s.grads);
            }
            sgd.step(nets, &sum, batch.len());
        }
        history.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            mean_loss: loss / n as f64,
            concept_accuracy: (cells > 0).then(|| hits as f64 / cells as f64),
            class_accuracy: (class_n > 0).then(|| class_hits as f64 / class_n as f64),
        });
    }
    Ok(history)
}

fn concept_hits(logits: &[f64], targets: &[f64]) -> usize {
    logits
        .iter()
        .zip(targets)
        .filter(|(&z, &t)| (z >= 0.0) == (t >= 0.5))
        .count()
}

/// Fits `g: x → c` with summed per-concept binary cross-entropy.
pub fn train_concept_net(
    g: &mut Network,
    images: &[&Tensor],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if images.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: images.len(),
            right: targets.len(),
        });
    }
    let k = g.output_len()?;
    for t in targets {
        LossSpec::BinaryCrossEntropyPerOutput { targets: t.clone() }.validate(k)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut nets = [g.clone()];
    let history = run(
        "concept",
        &mut nets,
        images.len(),
        cfg.epochs,
        cfg,
        &mut rng,
        |nets, i| {
            let (out, trace) = forward(&nets[0], images[i])?;
            let loss = LossSpec::BinaryCrossEntropyPerOutput {
                targets: targets[i].clone(),
            };
            let (value, grad) = loss.evaluate(out.data());
            let back = backward(&nets[0], &trace, &Tensor::vector(grad), true, false)?;
            Ok(SampleStep {
                loss: value,
                grads: vec![back.param_grads],
                concept_hits: concept_hits(out.data(), &targets[i]),
                concept_cells: k,
                class_hit: None,
            })
        },
    )?;
    let [trained] = nets;
    *g = trained;
    Ok(history)
}

/// Fits `f: c → y` with softmax cross-entropy on fixed bottleneck vectors.
pub fn train_class_net(
    f: &mut Network,
    inputs: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: labels.len(),
        });
    }
    let n_classes = f.output_len()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: n_classes,
        });
    }
    let inputs: Vec<Tensor> = inputs.iter().map(|v| Tensor::vector(v.clone())).collect();
    let mut rng = Rng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut nets = [f.clone()];
    let history = run(
        "class",
        &mut nets,
        inputs.len(),
        cfg.class_epochs,
        cfg,
        &mut rng,
        |nets, i| {
            let (out, trace) = forward(&nets[0], &inputs[i])?;
            let (value, grad) = LossSpec::SoftmaxCrossEntropy {
                target_class: labels[i],
            }
            .evaluate(out.data());
            let back = backward(&nets[0], &trace, &Tensor::vector(grad), true, false)?;
            Ok(SampleStep {
                loss: value,
                grads: vec![back.param_grads],
                concept_hits: 0,
                concept_cells: 0,
                class_hit: Some(argmax(out.data()) == labels[i]),
            })
        },
    )?;
    let [trained] = nets;
    *f = trained;
    Ok(history)
}

fn train_joint(
    model: &mut CbmModel,
    samples: &[SyntheticSample],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let k = model.n_concepts();
    let sigmoid_between = model.sigmoid_between;
    let mut rng = Rng::new(cfg.seed);
    let mut nets = [model.g.clone(), model.f.clone()];
    let history = run(
        "joint",
        &mut nets,
        samples.len(),
        cfg.epochs,
        cfg,
        &mut rng,
        |nets, i| {
            let s = &samples[i];
            let (g, f) = (&nets[0], &nets[1]);
            let (c, trace_g) = forward(g, &s.image)?;
            let h: Vec<f64> = if sigmoid_between {
                c.data().iter().map(|&z| sigmoid(z)).collect()
            } else {
                c.data().to_vec()
            };
            let (y, trace_f) = forward(f, &Tensor::vector(h.clone()))?;
            let (loss_y, grad_y) = LossSpec::SoftmaxCrossEntropy {
                target_class: s.class_label,
            }
            .evaluate(y.data());
            let back_f = backward(f, &trace_f, &Tensor::vector(grad_y), true, true)?;
            let dh = back_f.input_grad.expect("requested");
            let targets = s.concept_targets();
            let (loss_c, grad_c) = LossSpec::BinaryCrossEntropyPerOutput {
                targets: targets.clone(),
            }
            .evaluate(c.data());
            let dc: Vec<f64> = dh
                .data()
                .iter()
                .zip(&h)
                .zip(&grad_c)
                .map(|((&d, &hv), &gc)| {
                    let through = if sigmoid_between {
                        d * hv * (1.0 - hv)
                    } else {
                        d
                    };
                    through + lambda * gc
                })
                .collect();
            let back_g = backward(g, &trace_g, &Tensor::vector(dc), true, false)?;
            Ok(SampleStep {
                loss: loss_y + lambda * loss_c,
                grads: vec![back_g.param_grads, back_f.param_grads],
                concept_hits: concept_hits(c.data(), &targets),
                concept_cells: k,
                class_hit: Some(argmax(y.data()) == s.class_label),
            })
        },
    )?;
    let [g, f] = nets;
    model.g = g;
    model.f = f;
    Ok(history)
}

/// Trains `model` in place on `samples` according to `cfg.regime`.
pub fn train(
    model: &mut CbmModel,
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    match cfg.regime {
        Regime::Joint { lambda } => train_joint(model, samples, lambda, cfg),
        Regime::Independent => {
            let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
            let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.concept_targets()).collect();
            let mut history = train_concept_net(&mut model.g, &images, &targets, cfg)?;
            history.extend(train_class_net(&mut model.f, &targets, &labels, cfg)?);
            Ok(history)
        }
        Regime::Sequential => {
            let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
            let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.concept_targets()).collect();
            let mut history = train_concept_net(&mut model.g, &images, &targets, cfg)?;
            let g = &model.g;
            let bottlenecks = par::try_map(samples, |s| {
                let (c, _) = forward(g, &s.image)?;
                Ok::<_, Error>(model.bottleneck(c.data()))
            })?;
            history.extend(train_class_net(&mut model.f, &bottlenecks, &labels, cfg)?);
            Ok(history)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub concept_accuracy: f64,
    pub top1_accuracy: f64,
    pub samples: usize,
}

/// Concept binary accuracy and top-1 class accuracy of the full model.
pub fn evaluate(model: &CbmModel, samples: &[SyntheticSample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = par::try_map(samples, |s| predict(model, &s.image))?;
    let values: Vec<Vec<f64>> = preds.iter().map(|p| p.concepts.values.clone()).collect();
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.concepts.clone()).collect();
    let logits: Vec<Vec<f64>> = preds.into_iter().map(|p| p.class_logits).collect();
    let classes: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    Ok(Metrics {
        concept_accuracy: super::concept_binary_accuracy(&values, &labels)?,
        top1_accuracy: super::top1_accuracy(&logits, &classes)?,
        samples: samples.len(),
    })
}

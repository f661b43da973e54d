//! The three compared attribution methods behind one interface: LRP, the
//! plain input gradient and Integrated Gradients, each optionally wrapped in
//! a SmoothGrad noise tunnel.
//!
//! All methods attribute the raw score of the target (trailing sigmoid or
//! softmax layers are stripped) and return signed maps shaped like the
//! input.

use crate::autodiff::{backward, LossSpec};
use crate::error::{Error, Result};
use crate::lrp::{default_rule_map, lrp_attribute, RuleMap};
use crate::nn::{fold_batchnorm, forward, Network};
use crate::par;
use crate::synth::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_IG_STEPS: usize = 50;
pub const DEFAULT_SMOOTHGRAD_SAMPLES: usize = 25;
pub const DEFAULT_SMOOTHGRAD_SIGMA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// `None` selects [`default_rule_map`] for the (canonized) network.
    Lrp {
        rule_map: Option<RuleMap>,
    },
    Gradient,
    /// `None` baseline means all zeros.
    IntegratedGradients {
        steps: usize,
        baseline: Option<Tensor>,
    },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Lrp { .. } => "lrp",
            Method::Gradient => "grad",
            Method::IntegratedGradients { .. } => "ig",
        }
    }

    /// Parses `lrp`, `grad` or `ig` with default settings.
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "lrp" => Ok(Method::Lrp { rule_map: None }),
            "grad" | "gradient" => Ok(Method::Gradient),
            "ig" => Ok(Method::IntegratedGradients {
                steps: DEFAULT_IG_STEPS,
                baseline: None,
            }),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothGrad {
    pub n_samples: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SmoothGrad {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SMOOTHGRAD_SAMPLES,
            sigma: DEFAULT_SMOOTHGRAD_SIGMA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    pub method: Method,
    pub smoothgrad: Option<SmoothGrad>,
}

impl AttributionConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            smoothgrad: None,
        }
    }

    pub fn with_smoothgrad(mut self, sg: SmoothGrad) -> Self {
        self.smoothgrad = Some(sg);
        self
    }

    /// `lrp`, `grad`, `ig`, with `+sg` appended when noise-tunnelled.
    pub fn label(&self) -> String {
        match self.smoothgrad {
            Some(_) => format!("{}+sg", self.method.label()),
            None => self.method.label().to_string(),
        }
    }
}

/// A signed attribution over the attributed input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub target_index: usize,
    pub method: String,
}

fn check_target(network: &Network, target_index: usize) -> Result<()> {
    let n = network.score_network().output_len()?;
    if target_index >= n {
        return Err(Error::IndexOutOfRange {
            index: target_index,
            len: n,
        });
    }
    Ok(())
}

/// ∂score/∂input for a network already reduced to its score part.
fn score_gradient(scorer: &Network, input: &Tensor, target_index: usize) -> Result<Tensor> {
    let (out, trace) = forward(scorer, input)?;
    let loss = LossSpec::SelectOutput {
        index: target_index,
    };
    loss.validate(out.len())?;
    let (_, g) = loss.evaluate(out.data());
    let g = Tensor::new(out.shape().to_vec(), g)?;
    Ok(backward(scorer, &trace, &g, false, true)?
        .input_grad
        .expect("input gradient requested"))
}

/// Raw signed gradient of the target score.
pub fn gradient_saliency(
    network: &Network,
    input: &Tensor,
    target_index: usize,
) -> Result<AttributionMap> {
    check_target(network, target_index)?;
    let values = score_gradient(&network.score_network(), input, target_index)?;
    Ok(AttributionMap {
        values,
        target_index,
        method: "grad".into(),
    })
}

/// Integrated Gradients with the midpoint Riemann sum:
/// `IGᵢ = (xᵢ − x'ᵢ) · (1/m) Σₜ ∂score(x' + ((t − ½)/m)(x − x'))/∂xᵢ`.
pub fn integrated_gradients(
    network: &Network,
    input: &Tensor,
    target_index: usize,
    steps: usize,
    baseline: &Tensor,
) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(Error::InvalidArgument("IG needs at least one step".into()));
    }
    if baseline.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "baseline {:?} vs input {:?}",
            baseline.shape(),
            input.shape()
        )));
    }
    check_target(network, target_index)?;
    let scorer = network.score_network();
    let delta = input.sub(baseline)?;
    let grads = par::map_range(steps, |t| {
        let alpha = (t as f64 + 0.5) / steps as f64;
        let point = baseline.zip_map(&delta, |b, d| b + alpha * d)?;
        score_gradient(&scorer, &point, target_index)
    });
    let mut total = Tensor::zeros(input.shape());
    for g in grads {
        total.add_assign(&g?)?;
    }
    let m = steps as f64;
    let values = delta.zip_map(&total, |d, g| d * (g / m))?;
    Ok(AttributionMap {
        values,
        target_index,
        method: "ig".into(),
    })
}

/// LRP map for `network` (batch-norm is folded first when present).
pub fn lrp_saliency(
    network: &Network,
    input: &Tensor,
    target_index: usize,
    rule_map: Option<&RuleMap>,
) -> Result<AttributionMap> {
    check_target(network, target_index)?;
    let folded;
    let net = if network.first_batchnorm().is_some() {
        folded = fold_batchnorm(network)?;
        &folded
    } else {
        network
    };
    let default;
    let rules = match rule_map {
        Some(r) => r,
        None => {
            default = default_rule_map(net);
            &default
        }
    };
    let (_, trace) = forward(net, input)?;
    let (values, _) = lrp_attribute(net, &trace, target_index, rules)?;
    Ok(AttributionMap {
        values,
        target_index,
        method: "lrp".into(),
    })
}

fn base_map(
    method: &Method,
    network: &Network,
    input: &Tensor,
    target_index: usize,
) -> Result<AttributionMap> {
    match method {
        Method::Lrp { rule_map } => lrp_saliency(network, input, target_index, rule_map.as_ref()),
        Method::Gradient => gradient_saliency(network, input, target_index),
        Method::IntegratedGradients { steps, baseline } => {
            let zeros;
            let base = match baseline {
                Some(b) => b,
                None => {
                    zeros = Tensor::zeros(input.shape());
                    &zeros
                }
            };
            integrated_gradients(network, input, target_index, *steps, base)
        }
    }
}

/// Mean of the base method's maps over `n` inputs `x + η`, `η ~ N(0, σ²)`
/// drawn from a splitmix64 stream seeded with `seed`. With `σ = 0` every
/// draw equals `x` and the base map is returned unchanged.
pub fn smoothgrad(
    method: &Method,
    network: &Network,
    input: &Tensor,
    target_index: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<AttributionMap> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "SmoothGrad needs at least one sample".into(),
        ));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    let label = format!("{}+sg", method.label());
    if sigma == 0.0 {
        let mut m = base_map(method, network, input, target_index)?;
        m.method = label;
        return Ok(m);
    }
    let mut rng = Rng::new(seed);
    let noisy: Vec<Tensor> = (0..n)
        .map(|_| input.map(|v| v + sigma * rng.gaussian()))
        .collect();
    let maps = par::map(&noisy, |x| base_map(method, network, x, target_index));
    let mut total = Tensor::zeros(input.shape());
    for m in maps {
        total.add_assign(&m?.values)?;
    }
    Ok(AttributionMap {
        values: total.scale(1.0 / n as f64),
        target_index,
        method: label,
    })
}

/// Dispatches on `config`.
pub fn attribute(
    network: &Network,
    input: &Tensor,
    target_index: usize,
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    match config.smoothgrad {
        Some(sg) => smoothgrad(
            &config.method,
            network,
            input,
            target_index,
            sg.n_samples,
            sg.sigma,
            sg.seed,
        ),
        None => base_map(&config.method, network, input, target_index),
    }
}

/// Positive-part channel sum: `S(h, w) = Σ_c max(v[c, h, w], 0)`.
/// A `[H, W]` map is reduced to its positive part.
pub fn channel_reduce(map: &Tensor) -> Result<Tensor> {
    match *map.shape() {
        [c, h, w] => {
            let plane = h * w;
            let mut grid = vec![0.0; plane];
            for ch in 0..c {
                for (g, v) in grid
                    .iter_mut()
                    .zip(&map.data()[ch * plane..(ch + 1) * plane])
                {
                    *g += v.max(0.0);
                }
            }
            Tensor::new(vec![h, w], grid)
        }
        [_, _] => Ok(map.map(|v| v.max(0.0))),
        _ => Err(Error::Shape(format!(
            "channel_reduce expects [C, H, W] or [H, W], got {:?}",
            map.shape()
        ))),
    }
}

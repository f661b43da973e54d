//! Layer-wise relevance propagation.
//!
//! Relevance is seeded with the raw score of one output and redistributed
//! layer by layer down to the input. Every linear map (dense or
//! convolutional) uses one of three rules:
//!
//! * LRP-0: `R_j = Σ_k a_j w_jk / z_k · R_k`
//! * LRP-ε: the same with denominator `z_k + ε·sign(z_k)`, `sign(0) = +1`
//! * LRP-αβ: `R_j = Σ_k (α (a_j w_jk)⁺ / Z⁺_k − β (a_j w_jk)⁻ / Z⁻_k) R_k`
//!   with `Z^±_k = Σ_j (a_j w_jk)^± + b_k^±`
//!
//! `z_k` includes the bias. The bias share of each `R_k` is absorbed and
//! reported per layer instead of being redistributed, as is the share
//! taken by the ε stabilizer; outputs whose denominator is exactly zero pass
//! nothing down and their relevance is reported as dropped. Max pooling is
//! winner-takes-all through the recorded switches.

use crate::error::{Error, Result};
use crate::nn::kernels::{dense_forward, dense_transpose, switch_scatter, ConvGeom};
use crate::nn::{ActivationTrace, Conv2d, Layer, Network};
use crate::tensor::Tensor;

/// ε used when a rule map is built without an explicit value.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrpRule {
    Zero,
    Epsilon {
        epsilon: f64,
    },
    AlphaBeta {
        alpha: f64,
        beta: f64,
    },
    /// Relevance passes through unchanged (activations, flatten).
    Passthrough,
}

impl LrpRule {
    pub fn epsilon(epsilon: f64) -> Result<Self> {
        let rule = LrpRule::Epsilon { epsilon };
        rule.validate()?;
        Ok(rule)
    }

    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        let rule = LrpRule::AlphaBeta { alpha, beta };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrpRule::Epsilon { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => Err(
                Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")),
            ),
            LrpRule::AlphaBeta { alpha, beta }
                if !((alpha - beta - 1.0).abs() < 1e-12 && beta >= 0.0) =>
            {
                Err(Error::InvalidArgument(format!(
                    "alpha-beta needs alpha - beta = 1 and beta >= 0, got {alpha}, {beta}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Short name used in reports and on the command line.
    pub fn label(&self) -> String {
        match self {
            LrpRule::Zero => "lrp-0".into(),
            LrpRule::Epsilon { epsilon } => format!("lrp-eps({epsilon})"),
            LrpRule::AlphaBeta { alpha, beta } => format!("lrp-a{alpha}b{beta}"),
            LrpRule::Passthrough => "passthrough".into(),
        }
    }
}

/// One rule per layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleMap {
    rules: Vec<LrpRule>,
}

impl RuleMap {
    pub fn new(rules: Vec<LrpRule>) -> Result<Self> {
        for r in &rules {
            r.validate()?;
        }
        Ok(Self { rules })
    }

    /// The same rule on every parametric layer, passthrough elsewhere.
    pub fn uniform(network: &Network, rule: LrpRule) -> Self {
        Self {
            rules: network
                .layers
                .iter()
                .map(|l| {
                    if l.has_params() {
                        rule
                    } else {
                        LrpRule::Passthrough
                    }
                })
                .collect(),
        }
    }

    pub fn rules(&self) -> &[LrpRule] {
        &self.rules
    }

    pub fn get(&self, layer: usize) -> LrpRule {
        self.rules[layer]
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Checks coverage of `network` and that no parametric layer is passthrough.
    pub fn check(&self, network: &Network) -> Result<()> {
        if self.rules.len() != network.len() {
            return Err(Error::LengthMismatch {
                left: self.rules.len(),
                right: network.len(),
            });
        }
        for (i, (rule, layer)) in self.rules.iter().zip(&network.layers).enumerate() {
            if layer.has_params() && *rule == LrpRule::Passthrough {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) has parameters but a passthrough rule",
                    layer.kind()
                )));
            }
        }
        Ok(())
    }
}

/// Composite assignment for a canonized network with `C` convolutions:
/// the first `ceil(7C/13)` convolutions use αβ (α=1, β=0), the remaining
/// ones ε, every dense layer LRP-0, parameter-free layers passthrough.
/// For the 13-conv, 3-dense VGG-16 topology this is the 7/6/3 split.
pub fn default_rule_map(network: &Network) -> RuleMap {
    let n_conv = network
        .layers
        .iter()
        .filter(|l| matches!(l, Layer::Conv2d(_)))
        .count();
    let n_alpha_beta = (7 * n_conv).div_ceil(13);
    let mut conv_seen = 0;
    let rules = network
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv2d(_) => {
                conv_seen += 1;
                if conv_seen <= n_alpha_beta {
                    LrpRule::AlphaBeta {
                        alpha: 1.0,
                        beta: 0.0,
                    }
                } else {
                    LrpRule::Epsilon {
                        epsilon: DEFAULT_EPSILON,
                    }
                }
            }
            Layer::Linear(_) | Layer::BatchNorm2d(_) => LrpRule::Zero,
            _ => LrpRule::Passthrough,
        })
        .collect();
    RuleMap { rules }
}

/// Relevance handed to a layer's input, with the per-layer accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Redistribution {
    pub relevance_in: Tensor,
    /// Relevance assigned to bias terms.
    pub bias_absorbed: f64,
    /// Relevance taken by the ε stabilizer.
    pub stabilizer_absorbed: f64,
    /// Relevance of outputs with a zero denominator (plus the unmatched
    /// α/β shares of αβ outputs lacking positive/negative contributions).
    pub dropped: f64,
}

/// A linear map viewed abstractly: `apply` computes `W·a`, `transpose` `Wᵀ·s`.
trait LinearMap {
    fn apply(&self, a: &[f64], w: &[f64]) -> Vec<f64>;
    fn transpose(&self, s: &[f64], w: &[f64]) -> Vec<f64>;
}

struct Dense {
    n_in: usize,
    n_out: usize,
}

impl LinearMap for Dense {
    fn apply(&self, a: &[f64], w: &[f64]) -> Vec<f64> {
        dense_forward(w, None, a, self.n_out)
    }
    fn transpose(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        dense_transpose(w, s, self.n_in)
    }
}

impl LinearMap for ConvGeom {
    fn apply(&self, a: &[f64], w: &[f64]) -> Vec<f64> {
        self.forward(a, w, None)
    }
    fn transpose(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        ConvGeom::transpose(self, s, w)
    }
}

fn positive(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn negative(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.min(0.0)).collect()
}

/// Core rule over any linear map. `bias` is expanded to one value per output.
fn redistribute(
    map: &impl LinearMap,
    a: &[f64],
    w: &[f64],
    bias: &[f64],
    r_out: &[f64],
    rule: LrpRule,
) -> (Vec<f64>, f64, f64, f64) {
    let mut bias_absorbed = 0.0;
    let mut stabilizer = 0.0;
    let mut dropped = 0.0;
    match rule {
        LrpRule::Passthrough => (r_out.to_vec(), 0.0, 0.0, 0.0),
        LrpRule::Zero | LrpRule::Epsilon { .. } => {
            let eps = match rule {
                LrpRule::Epsilon { epsilon } => epsilon,
                _ => 0.0,
            };
            let z = map.apply(a, w);
            let s: Vec<f64> = z
                .iter()
                .zip(bias)
                .zip(r_out)
                .map(|((&zk, &bk), &rk)| {
                    let zk = zk + bk;
                    let stab = if zk >= 0.0 { eps } else { -eps };
                    let denom = zk + stab;
                    if denom == 0.0 {
                        dropped += rk;
                        return 0.0;
                    }
                    let sk = rk / denom;
                    bias_absorbed += bk * sk;
                    stabilizer += stab * sk;
                    sk
                })
                .collect();
            let back = map.transpose(&s, w);
            let r_in = a.iter().zip(&back).map(|(x, c)| x * c).collect();
            (r_in, bias_absorbed, stabilizer, dropped)
        }
        LrpRule::AlphaBeta { alpha, beta } => {
            let (a_pos, a_neg) = (positive(a), negative(a));
            let (w_pos, w_neg) = (positive(w), negative(w));
            // (a w)⁺ = a⁺w⁺ + a⁻w⁻ and (a w)⁻ = a⁺w⁻ + a⁻w⁺
            let zp1 = map.apply(&a_pos, &w_pos);
            let zp2 = map.apply(&a_neg, &w_neg);
            let zn1 = map.apply(&a_pos, &w_neg);
            let zn2 = map.apply(&a_neg, &w_pos);
            let n = r_out.len();
            let mut sp = vec![0.0; n];
            let mut sn = vec![0.0; n];
            for k in 0..n {
                let (bp, bn) = (bias[k].max(0.0), bias[k].min(0.0));
                let z_pos = zp1[k] + zp2[k] + bp;
                let z_neg = zn1[k] + zn2[k] + bn;
                if z_pos > 0.0 {
                    sp[k] = alpha * r_out[k] / z_pos;
                    bias_absorbed += bp * sp[k];
                } else {
                    dropped += alpha * r_out[k];
                }
                if beta != 0.0 {
                    if z_neg < 0.0 {
                        sn[k] = beta * r_out[k] / z_neg;
                        bias_absorbed -= bn * sn[k];
                    } else {
                        dropped -= beta * r_out[k];
                    }
                }
            }
            let pos_w_pos = map.transpose(&sp, &w_pos);
            let pos_w_neg = map.transpose(&sp, &w_neg);
            let (neg_w_pos, neg_w_neg) = if beta != 0.0 {
                (map.transpose(&sn, &w_pos), map.transpose(&sn, &w_neg))
            } else {
                (vec![0.0; a.len()], vec![0.0; a.len()])
            };
            let r_in = (0..a.len())
                .map(|j| {
                    a_pos[j] * (pos_w_pos[j] - neg_w_neg[j])
                        + a_neg[j] * (pos_w_neg[j] - neg_w_pos[j])
                })
                .collect();
            (r_in, bias_absorbed, stabilizer, dropped)
        }
    }
}

/// Applies `rule` to a dense layer. `weight` is `[out, in]`, as stored by
/// [`crate::nn::Linear`].
pub fn lrp_linear_rule(
    activations: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    relevance_out: &Tensor,
    rule: LrpRule,
) -> Result<Redistribution> {
    rule.validate()?;
    let ws = weight.shape();
    if ws.len() != 2
        || ws[1] != activations.len()
        || bias.len() != ws[0]
        || relevance_out.len() != ws[0]
    {
        return Err(Error::Shape(format!(
            "dense rule: activations {:?}, weight {:?}, bias {:?}, relevance {:?}",
            activations.shape(),
            ws,
            bias.shape(),
            relevance_out.shape()
        )));
    }
    let map = Dense {
        n_in: ws[1],
        n_out: ws[0],
    };
    let (r, b, s, d) = redistribute(
        &map,
        activations.data(),
        weight.data(),
        bias.data(),
        relevance_out.data(),
        rule,
    );
    Ok(Redistribution {
        relevance_in: Tensor::new(activations.shape().to_vec(), r)?,
        bias_absorbed: b,
        stabilizer_absorbed: s,
        dropped: d,
    })
}

/// Applies `rule` to a convolution, treating it as a patch-wise linear map.
pub fn lrp_conv_rule(
    layer: &Conv2d,
    input_activation: &Tensor,
    relevance_out: &Tensor,
    rule: LrpRule,
) -> Result<Redistribution> {
    rule.validate()?;
    let geom = layer.geometry(input_activation.shape()).ok_or_else(|| {
        Error::Shape(format!(
            "conv rule: input {:?} incompatible with kernel {:?}",
            input_activation.shape(),
            layer.weight.shape()
        ))
    })?;
    if relevance_out.shape() != [geom.c_out, geom.oh, geom.ow] {
        return Err(Error::Shape(format!(
            "conv rule: relevance {:?}, expected {:?}",
            relevance_out.shape(),
            [geom.c_out, geom.oh, geom.ow]
        )));
    }
    let plane = geom.oh * geom.ow;
    let bias: Vec<f64> = (0..geom.out_len())
        .map(|k| layer.bias.data()[k / plane])
        .collect();
    let (r, b, s, d) = redistribute(
        &geom,
        input_activation.data(),
        layer.weight.data(),
        &bias,
        relevance_out.data(),
        rule,
    );
    Ok(Redistribution {
        relevance_in: Tensor::new(input_activation.shape().to_vec(), r)?,
        bias_absorbed: b,
        stabilizer_absorbed: s,
        dropped: d,
    })
}

/// Winner-takes-all: every output relevance lands on its switch position.
pub fn lrp_maxpool(
    switches: &[usize],
    relevance_out: &Tensor,
    input_shape: &[usize],
) -> Result<Tensor> {
    if switches.len() != relevance_out.len() {
        return Err(Error::LengthMismatch {
            left: switches.len(),
            right: relevance_out.len(),
        });
    }
    let n: usize = input_shape.iter().product();
    if let Some(&bad) = switches.iter().find(|&&s| s >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    Tensor::new(
        input_shape.to_vec(),
        switch_scatter(switches, relevance_out.data(), n),
    )
}

/// Relevance at every activation of one propagation, with per-layer
/// accounting. `relevances[i]` is shaped like the input of layer `i`; the
/// last entry is the seeded score layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTrace {
    pub relevances: Vec<Tensor>,
    pub bias_absorbed: Vec<f64>,
    pub stabilizer_absorbed: Vec<f64>,
    pub dropped: Vec<f64>,
    pub target_index: usize,
    /// Raw score the propagation was seeded with.
    pub score: f64,
}

impl RelevanceTrace {
    pub fn input_relevance(&self) -> &Tensor {
        &self.relevances[0]
    }

    /// Number of propagated layers.
    pub fn depth(&self) -> usize {
        self.relevances.len() - 1
    }
}

/// Propagates the raw score of `target_index` back to the input.
///
/// Trailing sigmoid/softmax layers are skipped: the seed is the pre-squash
/// score with every other output at zero. The network must be canonized.
pub fn lrp_attribute(
    network: &Network,
    trace: &ActivationTrace,
    target_index: usize,
    rule_map: &RuleMap,
) -> Result<(Tensor, RelevanceTrace)> {
    if let Some(i) = network.first_batchnorm() {
        return Err(Error::NotCanonized { layer_index: i });
    }
    rule_map.check(network)?;
    if trace.len() != network.len() {
        return Err(Error::Shape(format!(
            "trace has {} layers, network {}",
            trace.len(),
            network.len()
        )));
    }
    let depth = network.score_network().len();
    let seed_act = &trace.activations()[depth];
    if target_index >= seed_act.len() {
        return Err(Error::IndexOutOfRange {
            index: target_index,
            len: seed_act.len(),
        });
    }
    let score = seed_act.data()[target_index];
    let mut seed = Tensor::zeros(seed_act.shape());
    seed.data_mut()[target_index] = score;

    let mut relevances = vec![seed];
    let mut bias_absorbed = vec![0.0; depth];
    let mut stabilizer_absorbed = vec![0.0; depth];
    let mut dropped = vec![0.0; depth];
    for i in (0..depth).rev() {
        let r_out = relevances.last().expect("seeded");
        let input = trace.input(i);
        let r_in = match &network.layers[i] {
            Layer::Conv2d(conv) => {
                let red = lrp_conv_rule(conv, input, r_out, rule_map.get(i))?;
                bias_absorbed[i] = red.bias_absorbed;
                stabilizer_absorbed[i] = red.stabilizer_absorbed;
                dropped[i] = red.dropped;
                red.relevance_in
            }
            Layer::Linear(lin) => {
                let red = lrp_linear_rule(input, &lin.weight, &lin.bias, r_out, rule_map.get(i))?;
                bias_absorbed[i] = red.bias_absorbed;
                stabilizer_absorbed[i] = red.stabilizer_absorbed;
                dropped[i] = red.dropped;
                red.relevance_in
            }
            Layer::MaxPool2d(_) => {
                let switches = trace
                    .switches(i)
                    .ok_or_else(|| Error::Shape(format!("no switches recorded for layer {i}")))?;
                lrp_maxpool(switches, r_out, input.shape())?
            }
            Layer::Relu | Layer::Sigmoid | Layer::Softmax | Layer::Flatten => {
                r_out.reshape(input.shape())?
            }
            Layer::BatchNorm2d(_) => unreachable!("rejected above"),
        };
        relevances.push(r_in);
    }
    relevances.reverse();
    let map = relevances[0].clone();
    Ok((
        map,
        RelevanceTrace {
            relevances,
            bias_absorbed,
            stabilizer_absorbed,
            dropped,
            target_index,
            score,
        },
    ))
}

/// Conservation bookkeeping for one activation level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConservationRow {
    /// Activation index (0 = network input).
    pub level: usize,
    pub sum_relevance: f64,
    /// Bias relevance absorbed by all layers above this level.
    pub bias_absorbed: f64,
    pub stabilizer_absorbed: f64,
    pub dropped: f64,
    /// `score − (sum_relevance + bias_absorbed)`.
    pub deficit: f64,
    /// Deficit not explained by the stabilizer or dropped outputs.
    pub unaccounted: f64,
}

/// Per-level relevance totals from the seed down to the input.
pub fn conservation_report(trace: &RelevanceTrace, output_score: f64) -> Vec<ConservationRow> {
    let depth = trace.depth();
    let mut rows = Vec::with_capacity(depth + 1);
    let (mut bias, mut stab, mut drop) = (0.0, 0.0, 0.0);
    for level in (0..=depth).rev() {
        if level < depth {
            bias += trace.bias_absorbed[level];
            stab += trace.stabilizer_absorbed[level];
            drop += trace.dropped[level];
        }
        let sum = trace.relevances[level].sum();
        let deficit = output_score - (sum + bias);
        rows.push(ConservationRow {
            level,
            sum_relevance: sum,
            bias_absorbed: bias,
            stabilizer_absorbed: stab,
            dropped: drop,
            deficit,
            unaccounted: deficit - stab - drop,
        });
    }
    rows
}

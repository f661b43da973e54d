//! Reverse-mode gradients through a traced forward pass, plus a
//! central-difference oracle.

use crate::error::{Error, Result};
use crate::nn::kernels::{dense_transpose, dense_weight_grad, switch_scatter};
use crate::nn::{forward, ActivationTrace, Layer, Network};
use crate::tensor::{sigmoid, softmax, Tensor};

/// Scalar objective computed from the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// The raw value of one output element.
    SelectOutput { index: usize },
    /// Sum over outputs of binary cross-entropy, treating each output as a
    /// logit: `softplus(z) − t·z`.
    BinaryCrossEntropyPerOutput { targets: Vec<f64> },
    /// Cross-entropy of `softmax(output)` against one class.
    SoftmaxCrossEntropy { target_class: usize },
}

impl LossSpec {
    pub fn validate(&self, output_len: usize) -> Result<()> {
        match self {
            LossSpec::SelectOutput { index }
            | LossSpec::SoftmaxCrossEntropy {
                target_class: index,
            } if *index >= output_len => Err(Error::IndexOutOfRange {
                index: *index,
                len: output_len,
            }),
            LossSpec::BinaryCrossEntropyPerOutput { targets } => {
                if targets.len() != output_len {
                    return Err(Error::LengthMismatch {
                        left: targets.len(),
                        right: output_len,
                    });
                }
                if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
                    return Err(Error::InvalidArgument("BCE targets must be 0 or 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Loss value and its gradient with respect to the output.
    pub fn evaluate(&self, output: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossSpec::SelectOutput { index } => {
                let mut g = vec![0.0; output.len()];
                g[*index] = 1.0;
                (output[*index], g)
            }
            LossSpec::BinaryCrossEntropyPerOutput { targets } => {
                let mut loss = 0.0;
                let g = output
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| {
                        // softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
                        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
                        sigmoid(z) - t
                    })
                    .collect();
                (loss, g)
            }
            LossSpec::SoftmaxCrossEntropy { target_class } => {
                let p = softmax(output);
                let loss = -p[*target_class].max(f64::MIN_POSITIVE).ln();
                let mut g = p;
                g[*target_class] -= 1.0;
                (loss, g)
            }
        }
    }
}

/// Input gradient plus per-layer parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub input_grad: Tensor,
    /// One entry per layer, mirroring [`Layer::params`] (empty for
    /// parameter-free layers).
    pub param_grads: Vec<Vec<Tensor>>,
}

/// Result of a vector-Jacobian product through a trace.
#[derive(Debug, Clone)]
pub struct Backward {
    pub input_grad: Option<Tensor>,
    pub param_grads: Vec<Vec<Tensor>>,
}

/// Propagates `output_grad` backwards through `trace`.
///
/// Parameter gradients are filled only when `with_params`; the input gradient
/// is computed only when `with_input` (skipping it saves the most expensive
/// transposed convolution during training).
pub fn backward(
    network: &Network,
    trace: &ActivationTrace,
    output_grad: &Tensor,
    with_params: bool,
    with_input: bool,
) -> Result<Backward> {
    if trace.len() != network.len() {
        return Err(Error::Shape(format!(
            "trace has {} layers, network {}",
            trace.len(),
            network.len()
        )));
    }
    if output_grad.shape() != trace.network_output().shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} vs output {:?}",
            output_grad.shape(),
            trace.network_output().shape()
        )));
    }
    let mut param_grads = vec![Vec::new(); network.len()];
    let mut grad = output_grad.clone();
    for (i, layer) in network.layers.iter().enumerate().rev() {
        let input = trace.input(i);
        let output = trace.output(i);
        let need_input = with_input || i > 0;
        let g = grad.data();
        let next: Option<Vec<f64>> = match layer {
            Layer::Conv2d(conv) => {
                let geom = conv
                    .geometry(input.shape())
                    .ok_or_else(|| Error::shape(i, "conv-compatible input", input.shape()))?;
                if with_params {
                    let dw = geom.weight_grad(input.data(), g);
                    let plane = geom.oh * geom.ow;
                    let db = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    param_grads[i] = vec![
                        Tensor::new(conv.weight.shape().to_vec(), dw)?,
                        Tensor::vector(db),
                    ];
                }
                need_input.then(|| geom.transpose(g, conv.weight.data()))
            }
            Layer::Linear(lin) => {
                if with_params {
                    param_grads[i] = vec![
                        Tensor::new(
                            lin.weight.shape().to_vec(),
                            dense_weight_grad(input.data(), g),
                        )?,
                        Tensor::vector(g.to_vec()),
                    ];
                }
                need_input.then(|| dense_transpose(lin.weight.data(), g, lin.in_features()))
            }
            Layer::Relu => Some(
                input
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
            ),
            Layer::Sigmoid => Some(
                output
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * y * (1.0 - y))
                    .collect(),
            ),
            Layer::Softmax => {
                let y = output.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                Some(y.iter().zip(g).map(|(&p, &d)| p * (d - dot)).collect())
            }
            Layer::MaxPool2d(_) => {
                let switches = trace
                    .switches(i)
                    .ok_or_else(|| Error::Shape(format!("no switches recorded for layer {i}")))?;
                Some(switch_scatter(switches, g, input.len()))
            }
            Layer::BatchNorm2d(bn) => {
                let (scale, _) = bn.affine();
                let plane = input.shape()[1] * input.shape()[2];
                if with_params {
                    let mut dgamma = vec![0.0; bn.channels()];
                    let mut dbeta = vec![0.0; bn.channels()];
                    for c in 0..bn.channels() {
                        let inv_std = 1.0 / (bn.running_var.data()[c] + bn.eps).sqrt();
                        let mean = bn.running_mean.data()[c];
                        for k in c * plane..(c + 1) * plane {
                            dgamma[c] += g[k] * (input.data()[k] - mean) * inv_std;
                            dbeta[c] += g[k];
                        }
                    }
                    param_grads[i] = vec![Tensor::vector(dgamma), Tensor::vector(dbeta)];
                }
                Some(
                    g.iter()
                        .enumerate()
                        .map(|(k, &d)| d * scale[k / plane])
                        .collect(),
                )
            }
            Layer::Flatten => Some(g.to_vec()),
        };
        match next {
            Some(d) => grad = Tensor::new(input.shape().to_vec(), d)?,
            None => {
                return Ok(Backward {
                    input_grad: None,
                    param_grads,
                })
            }
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteValue { layer_index: i });
        }
    }
    Ok(Backward {
        input_grad: Some(grad),
        param_grads,
    })
}

fn loss_and_output_grad(
    network: &Network,
    input: &Tensor,
    loss: &LossSpec,
) -> Result<(f64, Tensor, ActivationTrace)> {
    let (out, trace) = forward(network, input)?;
    loss.validate(out.len())?;
    let (value, g) = loss.evaluate(out.data());
    Ok((value, Tensor::new(out.shape().to_vec(), g)?, trace))
}

/// ∂loss/∂input.
pub fn input_gradient(network: &Network, input: &Tensor, loss: &LossSpec) -> Result<Tensor> {
    let (_, g, trace) = loss_and_output_grad(network, input, loss)?;
    let back = backward(network, &trace, &g, false, true)?;
    Ok(back.input_grad.expect("input gradient requested"))
}

/// Loss value, input gradient and every layer's parameter gradients.
pub fn param_gradients(
    network: &Network,
    input: &Tensor,
    loss: &LossSpec,
) -> Result<GradientBundle> {
    let (value, g, trace) = loss_and_output_grad(network, input, loss)?;
    let back = backward(network, &trace, &g, true, true)?;
    Ok(GradientBundle {
        loss: value,
        input_grad: back.input_grad.expect("input gradient requested"),
        param_grads: back.param_grads,
    })
}

pub fn evaluate_loss(network: &Network, input: &Tensor, loss: &LossSpec) -> Result<f64> {
    let (out, _) = forward(network, input)?;
    loss.validate(out.len())?;
    Ok(loss.evaluate(out.data()).0)
}

/// Central differences `(L(x + h·eᵢ) − L(x − h·eᵢ)) / 2h` for every input coordinate.
pub fn finite_difference_gradient(
    network: &Network,
    input: &Tensor,
    loss: &LossSpec,
    h: f64,
) -> Result<Tensor> {
    central_differences(|x| evaluate_loss(network, x, loss), input, h)
}

/// Central differences of an arbitrary scalar function.
pub fn central_differences(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    input: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = input.clone();
    let mut grad = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let x = input.data()[i];
        probe.data_mut()[i] = x + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(input.shape().to_vec(), grad)
}

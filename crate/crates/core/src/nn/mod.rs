//! Sequential networks: layer definitions, shape inference, forward
//! execution with activation tracing, and batch-norm folding.

mod fold;
mod forward;
pub mod kernels;

pub use fold::fold_batchnorm;
pub use forward::{apply_maxpool, forward, ActivationTrace};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: (usize, usize),
    /// Zero padding on each side.
    pub padding: (usize, usize),
}

impl Conv2d {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let conv = Self {
            weight,
            bias,
            stride,
            padding,
        };
        conv.validate()?;
        Ok(conv)
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv weight must be rank 4, got {ws:?}"
            )));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv bias {:?} does not match {} output channels",
                self.bias.shape(),
                ws[0]
            )));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Shape("conv stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Geometry for an input of shape `[c, h, w]`, if compatible.
    pub fn geometry(&self, input_shape: &[usize]) -> Option<ConvGeom> {
        let &[c, h, w] = input_shape else {
            return None;
        };
        if c != self.in_channels() {
            return None;
        }
        let (kh, kw) = self.kernel();
        let (oh, ow) = ConvGeom::output_dims(h, w, (kh, kw), self.stride, self.padding)?;
        Some(ConvGeom {
            c_in: c,
            h,
            w,
            c_out: self.out_channels(),
            kh,
            kw,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.padding.0,
            pw: self.padding.1,
            oh,
            ow,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let lin = Self { weight, bias };
        lin.validate()?;
        Ok(lin)
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 2 || self.bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear weight {ws:?} / bias {:?} inconsistent",
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl MaxPool2d {
    /// Pooled dims; the kernel must tile the input exactly along the stride.
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || h < kh || w < kw {
            return None;
        }
        if (h - kh) % sh != 0 || (w - kw) % sw != 0 {
            return None;
        }
        Some(((h - kh) / sh + 1, (w - kw) / sw + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm2d {
    fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        let ok = [
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
        ]
        .iter()
        .all(|t| t.shape() == [c]);
        if !ok {
            return Err(Error::Shape("batch-norm parameter lengths differ".into()));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) || self.eps < 0.0 {
            return Err(Error::Shape(
                "batch-norm variance and eps must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `y = scale·x + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(self.running_mean.data())
            .zip(self.beta.data())
            .map(|((s, m), b)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2d(MaxPool2d),
    BatchNorm2d(BatchNorm2d),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Conv2d(_) | Layer::Linear(_) | Layer::BatchNorm2d(_)
        )
    }

    /// Trainable parameters in declaration order (weight then bias, or gamma then beta).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Conv2d(c) => c.validate(),
            Layer::Linear(l) => l.validate(),
            Layer::BatchNorm2d(b) => b.validate(),
            Layer::MaxPool2d(p) if p.stride.0 == 0 || p.stride.1 == 0 => {
                Err(Error::Shape("pool stride must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Output shape for `input`, or a `ShapeMismatch` tagged with `index`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let g = c.geometry(input).ok_or_else(|| {
                    Error::shape(
                        index,
                        format!(
                            "[{}, h, w] fitting a {:?} kernel",
                            c.in_channels(),
                            c.kernel()
                        ),
                        input,
                    )
                })?;
                Ok(vec![g.c_out, g.oh, g.ow])
            }
            Layer::Linear(l) => {
                if input != [l.in_features()] {
                    return Err(Error::shape(index, format!("[{}]", l.in_features()), input));
                }
                Ok(vec![l.out_features()])
            }
            Layer::MaxPool2d(p) => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(index, "[c, h, w]", input));
                };
                let (oh, ow) = p.output_dims(h, w).ok_or_else(|| {
                    Error::shape(
                        index,
                        format!(
                            "spatial dims tiled by kernel {:?} stride {:?}",
                            p.kernel, p.stride
                        ),
                        input,
                    )
                })?;
                Ok(vec![c, oh, ow])
            }
            Layer::BatchNorm2d(b) => {
                if input.len() != 3 || input[0] != b.channels() {
                    return Err(Error::shape(
                        index,
                        format!("[{}, h, w]", b.channels()),
                        input,
                    ));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu | Layer::Sigmoid | Layer::Softmax => Ok(input.to_vec()),
        }
    }
}

/// An ordered stack of layers with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
}

impl Network {
    /// Builds a network, checking every layer's internal consistency and that
    /// consecutive shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        for layer in &layers {
            layer.validate()?;
        }
        let net = Self {
            layers,
            input_shape,
        };
        infer_shapes(&net, &net.input_shape)?;
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(infer_shapes(self, &self.input_shape)?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Number of output elements.
    pub fn output_len(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    /// Index of the first batch-norm layer, if any remains.
    pub fn first_batchnorm(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::BatchNorm2d(_)))
    }

    /// The network truncated before any trailing sigmoid/softmax, i.e. the
    /// part that produces raw scores.
    pub fn score_network(&self) -> Network {
        let mut end = self.layers.len();
        while end > 0 && matches!(self.layers[end - 1], Layer::Sigmoid | Layer::Softmax) {
            end -= 1;
        }
        Network {
            layers: self.layers[..end].to_vec(),
            input_shape: self.input_shape.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }
}

/// Per-layer output shapes for `input_shape`; the last entry is the network output.
pub fn infer_shapes(network: &Network, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(network.layers.len());
    let mut current = input_shape.to_vec();
    for (i, layer) in network.layers.iter().enumerate() {
        current = layer.output_shape(i, &current)?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

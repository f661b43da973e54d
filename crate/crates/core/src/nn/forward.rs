use super::kernels::{dense_forward, maxpool_forward};
use super::{Layer, MaxPool2d, Network};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax, Tensor};

/// Every intermediate activation of one forward pass.
///
/// `activations[0]` is the network input and `activations[i + 1]` the output
/// of layer `i`, so the output of layer `i` is by construction the input of
/// layer `i + 1`. Pooling layers also record their argmax switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    switches: Vec<Option<Vec<usize>>>,
}

impl ActivationTrace {
    /// Number of traced layers.
    pub fn len(&self) -> usize {
        self.switches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.switches.is_empty()
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn network_output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input")
    }

    pub fn switches(&self, layer: usize) -> Option<&[usize]> {
        self.switches[layer].as_deref()
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }
}

/// Max pooling with winner switches (flat indices into `input`; ties go to
/// the lowest row-major index of the window).
pub fn apply_maxpool(pool: &MaxPool2d, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let layer = Layer::MaxPool2d(*pool);
    let out_shape = layer.output_shape(0, input.shape())?;
    let s = input.shape();
    let (data, switches) =
        maxpool_forward(input.data(), (s[0], s[1], s[2]), pool.kernel, pool.stride);
    Ok((Tensor::new(out_shape, data)?, switches))
}

/// Applies one layer in inference mode.
pub(crate) fn apply_layer(
    index: usize,
    layer: &Layer,
    input: &Tensor,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let out_shape = layer.output_shape(index, input.shape())?;
    let (data, switches) = match layer {
        Layer::Conv2d(conv) => {
            let g = conv
                .geometry(input.shape())
                .expect("checked by output_shape");
            (
                g.forward(input.data(), conv.weight.data(), Some(conv.bias.data())),
                None,
            )
        }
        Layer::Linear(lin) => (
            dense_forward(
                lin.weight.data(),
                Some(lin.bias.data()),
                input.data(),
                lin.out_features(),
            ),
            None,
        ),
        Layer::Relu => (input.data().iter().map(|&v| v.max(0.0)).collect(), None),
        Layer::Sigmoid => (input.data().iter().map(|&v| sigmoid(v)).collect(), None),
        Layer::Softmax => (softmax(input.data()), None),
        Layer::MaxPool2d(pool) => {
            let s = input.shape();
            let (d, sw) =
                maxpool_forward(input.data(), (s[0], s[1], s[2]), pool.kernel, pool.stride);
            (d, Some(sw))
        }
        Layer::BatchNorm2d(bn) => {
            let (scale, shift) = bn.affine();
            let plane = input.shape()[1] * input.shape()[2];
            let mut d = input.data().to_vec();
            for (c, chunk) in d.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = *v * scale[c] + shift[c];
                }
            }
            (d, None)
        }
        Layer::Flatten => (input.data().to_vec(), None),
    };
    let out = Tensor::new(out_shape, data)?;
    if !out.is_finite() {
        return Err(Error::NonFiniteValue { layer_index: index });
    }
    Ok((out, switches))
}

/// Runs `input` through every layer, recording the full activation trace.
pub fn forward(network: &Network, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    if input.shape() != network.input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            layer_index: 0,
            expected: format!("{:?}", network.input_shape),
            got: input.shape().to_vec(),
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFiniteValue { layer_index: 0 });
    }
    let mut activations = Vec::with_capacity(network.layers.len() + 1);
    let mut switches = Vec::with_capacity(network.layers.len());
    activations.push(input.clone());
    for (i, layer) in network.layers.iter().enumerate() {
        let (out, sw) = apply_layer(i, layer, &activations[i])?;
        activations.push(out);
        switches.push(sw);
    }
    let output = activations.last().cloned().expect("input pushed");
    Ok((
        output,
        ActivationTrace {
            activations,
            switches,
        },
    ))
}

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Folds every inference-mode batch-norm into the convolution before it.
///
/// `w' = w·γ/√(var+eps)` and `b' = (b − mean)·γ/√(var+eps) + β`, per output
/// channel. The returned network has no `BatchNorm2d` layers.
pub fn fold_batchnorm(network: &Network) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::with_capacity(network.layers.len());
    for (i, layer) in network.layers.iter().enumerate() {
        let Layer::BatchNorm2d(bn) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let Some(Layer::Conv2d(conv)) = layers.last_mut() else {
            return Err(Error::CannotFold { layer_index: i });
        };
        if conv.out_channels() != bn.channels() {
            return Err(Error::shape(
                i,
                format!("{} channels", conv.out_channels()),
                &[bn.channels()],
            ));
        }
        let scale: Vec<f64> = bn
            .gamma
            .data()
            .iter()
            .zip(bn.running_var.data())
            .map(|(g, v)| g / (v + bn.eps).sqrt())
            .collect();
        let per_out = conv.weight.len() / conv.out_channels();
        let mut w = conv.weight.data().to_vec();
        for (oc, chunk) in w.chunks_mut(per_out).enumerate() {
            for v in chunk {
                *v *= scale[oc];
            }
        }
        let b: Vec<f64> = conv
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(oc, &b)| (b - bn.running_mean.data()[oc]) * scale[oc] + bn.beta.data()[oc])
            .collect();
        conv.weight = Tensor::new(conv.weight.shape().to_vec(), w)?;
        conv.bias = Tensor::vector(b);
    }
    Ok(Network {
        layers,
        input_shape: network.input_shape.clone(),
    })
}

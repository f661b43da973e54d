//! Random networks and independent numeric oracles shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use cbx_core::nn::{forward, BatchNorm2d, Conv2d, Layer, Linear, MaxPool2d, Network};
use cbx_core::synth::Rng;
use cbx_core::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(lo, hi)).collect(),
    )
    .unwrap()
}

fn bias(rng: &mut Rng, n: usize, with_bias: bool) -> Tensor {
    if with_bias {
        random_tensor(rng, &[n], -0.5, 0.5)
    } else {
        Tensor::zeros(&[n])
    }
}

pub fn linear(rng: &mut Rng, n_in: usize, n_out: usize, with_bias: bool) -> Layer {
    let w = random_tensor(rng, &[n_out, n_in], -1.0, 1.0);
    Layer::Linear(Linear::new(w, bias(rng, n_out, with_bias)).unwrap())
}

fn conv(
    rng: &mut Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> Layer {
    let w = random_tensor(rng, &[c_out, c_in, k, k], -1.0, 1.0);
    Layer::Conv2d(
        Conv2d::new(w, bias(rng, c_out, with_bias), (stride, stride), (pad, pad)).unwrap(),
    )
}

fn batchnorm(rng: &mut Rng, c: usize, with_bias: bool) -> Layer {
    let (mean, beta) = if with_bias {
        (
            random_tensor(rng, &[c], -0.5, 0.5),
            random_tensor(rng, &[c], -0.5, 0.5),
        )
    } else {
        (Tensor::zeros(&[c]), Tensor::zeros(&[c]))
    };
    Layer::BatchNorm2d(BatchNorm2d {
        gamma: random_tensor(rng, &[c], 0.5, 1.5),
        beta,
        running_mean: mean,
        running_var: random_tensor(rng, &[c], 0.5, 2.0),
        eps: 1e-5,
    })
}

fn pool(k: usize) -> Layer {
    Layer::MaxPool2d(MaxPool2d {
        kernel: (k, k),
        stride: (k, k),
    })
}

/// Dense ReLU net with `depth` (1..=3) linear layers and no final activation.
pub fn random_mlp(rng: &mut Rng, n_in: usize, depth: usize, with_bias: bool) -> Network {
    let mut layers = Vec::new();
    let mut width = n_in;
    for d in 0..depth {
        let out = if d + 1 == depth {
            1 + rng.below(3)
        } else {
            2 + rng.below(5)
        };
        layers.push(linear(rng, width, out, with_bias));
        if d + 1 < depth {
            layers.push(Layer::Relu);
        }
        width = out;
    }
    Network::new(vec![n_in], layers).unwrap()
}

/// Shallow convnet: conv → ReLU → 2×2 max pool → dense. Two parameter layers.
pub fn random_small_convnet(rng: &mut Rng, with_bias: bool) -> Network {
    let c_in = 1 + rng.below(2);
    let side = 4 + 2 * rng.below(2);
    let c1 = 2 + rng.below(2);
    let n_out = 1 + rng.below(3);
    let layers = vec![
        conv(rng, c_in, c1, 3, 1, 1, with_bias),
        Layer::Relu,
        pool(2),
        Layer::Flatten,
        linear(rng, c1 * (side / 2) * (side / 2), n_out, with_bias),
    ];
    Network::new(vec![c_in, side, side], layers).unwrap()
}

/// Deeper convnet, optionally with batch-norm after each convolution (with
/// zero running mean and shift when `with_bias` is false, so folding keeps
/// the biases at zero).
pub fn random_convnet(rng: &mut Rng, with_bias: bool, with_bn: bool) -> Network {
    let c_in = 1 + rng.below(3);
    let side = 8;
    let (c1, c2) = (2 + rng.below(3), 2 + rng.below(3));
    let hidden = 3 + rng.below(4);
    let n_out = 2 + rng.below(3);
    let mut layers = vec![conv(rng, c_in, c1, 3, 1, 1, with_bias)];
    if with_bn {
        layers.push(batchnorm(rng, c1, with_bias));
    }
    layers.extend([Layer::Relu, pool(2), conv(rng, c1, c2, 3, 1, 1, with_bias)]);
    if with_bn {
        layers.push(batchnorm(rng, c2, with_bias));
    }
    layers.extend([
        Layer::Relu,
        pool(2),
        Layer::Flatten,
        linear(rng, c2 * 4, hidden, with_bias),
        Layer::Relu,
        linear(rng, hidden, n_out, with_bias),
    ]);
    Network::new(vec![c_in, side, side], layers).unwrap()
}

/// Smallest distance of the forward pass to a non-differentiable point:
/// `|z|` over ReLU inputs and the gap between the two largest entries of
/// every pooling window.
pub fn kink_margin(net: &Network, input: &Tensor) -> f64 {
    let (_, trace) = forward(net, input).unwrap();
    let mut margin = f64::INFINITY;
    for (i, layer) in net.layers.iter().enumerate() {
        let x = trace.input(i);
        match layer {
            Layer::Relu => {
                for &z in x.data() {
                    margin = margin.min(z.abs());
                }
            }
            Layer::MaxPool2d(p) => {
                let &[c, h, w] = x.shape() else {
                    unreachable!()
                };
                let (kh, kw) = p.kernel;
                for ch in 0..c {
                    for oy in 0..h / kh {
                        for ox in 0..w / kw {
                            let mut vals: Vec<f64> = (0..kh * kw)
                                .map(|t| {
                                    x.data()[ch * h * w + (oy * kh + t / kw) * w + ox * kw + t % kw]
                                })
                                .collect();
                            vals.sort_by(|a, b| b.total_cmp(a));
                            if vals.len() > 1 {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Central differences with step `h`, written out independently of the
/// library's own helper.
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// `max_i |a_i − b_i| / max_i |b_i|`, or the absolute error when `b` is zero.
pub fn normwise_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Elementwise `|a − b| / max(|a|, |b|)`, zero where both are zero.
pub fn max_elementwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| {
        let scale = x.abs().max(y.abs());
        if scale == 0.0 {
            m
        } else {
            m.max((x - y).abs() / scale)
        }
    })
}

/// The raw (pre-squash) score of output `index`.
pub fn score(net: &Network, x: &Tensor, index: usize) -> f64 {
    forward(&net.score_network(), x).unwrap().0.data()[index]
}

//! Raw convolution, dense and pooling kernels over flat slices.
//!
//! Forward, backward and relevance passes all reduce to the same three
//! convolution loops, so they share one geometry description.

/// Geometry of a 2D convolution over a `[c_in, h, w]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output spatial dims, or `None` when the kernel does not fit the padded input.
    pub fn output_dims(
        h: usize,
        w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * padding.0, w + 2 * padding.1);
        if ph < kernel.0 || pw < kernel.1 || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some((
            (ph - kernel.0) / stride.0 + 1,
            (pw - kernel.1) / stride.1 + 1,
        ))
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Visits every contiguous run of (output, input) pairs that share one
    /// weight tap. For each run the callback receives the weight index, the
    /// first input index, the first output index and the run length; input
    /// indices advance by `sw` per step, output indices by 1.
    #[inline]
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        for oc in 0..self.c_out {
            for ic in 0..self.c_in {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let widx = ((oc * self.c_in + ic) * self.kh + ky) * self.kw + kx;
                        // ix = ox*sw + kx - pw must satisfy 0 <= ix < w
                        let off = kx as isize - self.pw as isize;
                        let sw = self.sw as isize;
                        let lo = if off >= 0 { 0 } else { (-off + sw - 1) / sw };
                        let hi_excl = if w - 1 - off < 0 {
                            0
                        } else {
                            ((w - 1 - off) / sw + 1).min(self.ow as isize)
                        };
                        if lo >= hi_excl {
                            continue;
                        }
                        let len = (hi_excl - lo) as usize;
                        for oy in 0..self.oh {
                            let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let in_start = (ic as isize * h + iy) * w + lo * sw + off;
                            let out_start = (oc * self.oh + oy) * self.ow + lo as usize;
                            f(widx, in_start as usize, out_start, len);
                        }
                    }
                }
            }
        }
    }

    /// `out = conv(input, weight) + bias` (bias optional).
    pub fn forward(&self, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.out_len()];
        if let Some(b) = bias {
            for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b[oc]);
            }
        }
        let sw = self.sw;
        self.runs(|widx, i0, o0, len| {
            let wv = weight[widx];
            let dst = &mut out[o0..o0 + len];
            if sw == 1 {
                for (d, &x) in dst.iter_mut().zip(&input[i0..i0 + len]) {
                    *d += wv * x;
                }
            } else {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += wv * input[i0 + k * sw];
                }
            }
        });
        out
    }

    /// Transposed convolution: scatters output-space values back to the input
    /// space through `weight`. This is the input gradient of `forward`.
    pub fn transpose(&self, out_vals: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut input = vec![0.0; self.in_len()];
        let sw = self.sw;
        self.runs(|widx, i0, o0, len| {
            let wv = weight[widx];
            let src = &out_vals[o0..o0 + len];
            if sw == 1 {
                for (d, &g) in input[i0..i0 + len].iter_mut().zip(src) {
                    *d += wv * g;
                }
            } else {
                for (k, &g) in src.iter().enumerate() {
                    input[i0 + k * sw] += wv * g;
                }
            }
        });
        input
    }

    /// Weight gradient: correlation of the input with output-space values.
    pub fn weight_grad(&self, input: &[f64], out_vals: &[f64]) -> Vec<f64> {
        let mut dw = vec![0.0; self.weight_len()];
        let sw = self.sw;
        self.runs(|widx, i0, o0, len| {
            let src = &out_vals[o0..o0 + len];
            let mut acc = 0.0;
            if sw == 1 {
                for (&g, &x) in src.iter().zip(&input[i0..i0 + len]) {
                    acc += g * x;
                }
            } else {
                for (k, &g) in src.iter().enumerate() {
                    acc += g * input[i0 + k * sw];
                }
            }
            dw[widx] += acc;
        });
        dw
    }
}

/// `weight` is `[out, in]` row-major. Returns `weight · input + bias`.
pub fn dense_forward(
    weight: &[f64],
    bias: Option<&[f64]>,
    input: &[f64],
    n_out: usize,
) -> Vec<f64> {
    let n_in = input.len();
    (0..n_out)
        .map(|o| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// `weightᵀ · out_vals`.
pub fn dense_transpose(weight: &[f64], out_vals: &[f64], n_in: usize) -> Vec<f64> {
    let mut input = vec![0.0; n_in];
    for (o, &g) in out_vals.iter().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        for (d, w) in input.iter_mut().zip(row) {
            *d += w * g;
        }
    }
    input
}

/// Outer product `out_vals ⊗ input`, the weight gradient of a dense layer.
pub fn dense_weight_grad(input: &[f64], out_vals: &[f64]) -> Vec<f64> {
    let mut dw = Vec::with_capacity(input.len() * out_vals.len());
    for &g in out_vals {
        dw.extend(input.iter().map(|x| g * x));
    }
    dw
}

/// Max pooling over `[c, h, w]`. Returns the pooled values and, per output,
/// the flat input index of the winning element (first maximum in row-major
/// window order).
pub fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut switches = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * sh) * w + ox * sw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let idx = (ch * h + oy * sh + ky) * w + ox * sw + kx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                switches.push(best);
            }
        }
    }
    (out, switches)
}

/// Routes each output value to its recorded switch position.
pub fn switch_scatter(switches: &[usize], out_vals: &[f64], in_len: usize) -> Vec<f64> {
    let mut input = vec![0.0; in_len];
    for (&s, &v) in switches.iter().zip(out_vals) {
        input[s] += v;
    }
    input
}

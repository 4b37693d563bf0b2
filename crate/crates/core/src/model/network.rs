//! Forward and backward passes of the distance-regression network.
//!
//! Everything here is generic over the float type so the same code path
//! trains in `f32` and is gradient-checked in `f64`. Feature maps are stored
//! channel-major (`[c][y][x]`).

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::arch::Architecture;

pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvLayout {
    pub weight: usize,
    pub bias: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub convs: Vec<ConvLayout>,
    pub head_weight: usize,
    pub head_bias: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut offset = 0;
        let mut in_ch = INPUT_CHANNELS;
        let convs = arch
            .layers()
            .map(|l| {
                let weight = offset;
                offset += l.out_channels * in_ch * l.kernel * l.kernel;
                let bias = offset;
                offset += l.out_channels;
                let c = ConvLayout {
                    weight,
                    bias,
                    kernel: l.kernel,
                    stride: l.stride,
                    in_ch,
                    out_ch: l.out_channels,
                };
                in_ch = l.out_channels;
                c
            })
            .collect();
        let head_weight = offset;
        let head_bias = offset + in_ch;
        Self { convs, head_weight, head_bias, total: head_bias + 1 }
    }

    pub fn final_channels(&self) -> usize {
        self.convs.last().map_or(INPUT_CHANNELS, |c| c.out_ch)
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// A network-ready sample: normalized two-channel input plus the mask
/// sampled at the final feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub pooled_mask: Vec<bool>,
}

impl<T: Float> Prepared<T> {
    /// Channel 0 is `disparity / norm` with masked-out pixels zeroed;
    /// channel 1 is the mask.
    pub(crate) fn new(
        arch: &Architecture,
        height: usize,
        width: usize,
        disparity: &[f32],
        mask: &[f32],
        norm: f64,
    ) -> Self {
        let n = height * width;
        let inv = T::from(1.0 / norm).unwrap();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(
            disparity.iter().zip(mask).map(|(&d, &m)| T::from(d).unwrap() * inv * T::from(m).unwrap()),
        );
        data.extend(mask.iter().map(|&m| T::from(m).unwrap()));

        let stride = arch.total_stride();
        let (mut h, mut w) = (height, width);
        for l in arch.layers() {
            h = out_size(h, l.stride);
            w = out_size(w, l.stride);
        }
        let pooled_mask = (0..h * w)
            .map(|i| mask[(i / w) * stride * width + (i % w) * stride] > 0.5)
            .collect();
        Self { height, width, data, pooled_mask }
    }
}

/// Post-rectifier activations of every conv layer, kept for backprop.
pub(crate) struct Trace<T> {
    pub maps: Vec<(Vec<T>, usize, usize)>,
    pooled: Vec<T>,
    pub output: T,
}

/// Valid output-column range for kernel tap `kx`.
fn tap_range(kx: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    if in_len + pad < kx + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - kx) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Float>(
    x: &[T],
    h: usize,
    w: usize,
    params: &[T],
    c: &ConvLayout,
    y: &mut [T],
    ho: usize,
    wo: usize,
) {
    let (k, s, pad) = (c.kernel, c.stride, c.kernel / 2);
    for co in 0..c.out_ch {
        let y_c = &mut y[co * ho * wo..(co + 1) * ho * wo];
        y_c.fill(params[c.bias + co]);
        for oy in 0..ho {
            let y_row = &mut y_c[oy * wo..(oy + 1) * wo];
            for ci in 0..c.in_ch {
                for ky in 0..k {
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let x_row = &x[(ci * h + iy - pad) * w..][..w];
                    let w_base = c.weight + ((co * c.in_ch + ci) * k + ky) * k;
                    for kx in 0..k {
                        let wv = params[w_base + kx];
                        let (lo, hi) = tap_range(kx, pad, s, w, wo);
                        if s == 1 {
                            let src = &x_row[lo + kx - pad..hi + kx - pad];
                            for (o, &xv) in y_row[lo..hi].iter_mut().zip(src) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                y_row[ox] = y_row[ox] + wv * x_row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `gx` is given, the input
/// gradient for one conv layer. `gy` is the gradient w.r.t. the
/// pre-activation output.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Float>(
    x: &[T],
    h: usize,
    w: usize,
    params: &[T],
    c: &ConvLayout,
    gy: &[T],
    ho: usize,
    wo: usize,
    grads: &mut [T],
    mut gx: Option<&mut [T]>,
) {
    let (k, s, pad) = (c.kernel, c.stride, c.kernel / 2);
    for co in 0..c.out_ch {
        let g_c = &gy[co * ho * wo..(co + 1) * ho * wo];
        let mut bias_grad = T::zero();
        for oy in 0..ho {
            let g_row = &g_c[oy * wo..(oy + 1) * wo];
            let mut row_sum = T::zero();
            for &g in g_row {
                row_sum = row_sum + g;
            }
            bias_grad = bias_grad + row_sum;
            if g_row.iter().all(|g| g.is_zero()) {
                continue;
            }
            for ci in 0..c.in_ch {
                for ky in 0..k {
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let row_start = (ci * h + iy - pad) * w;
                    let x_row = &x[row_start..row_start + w];
                    let w_base = ((co * c.in_ch + ci) * k + ky) * k;
                    for kx in 0..k {
                        let (lo, hi) = tap_range(kx, pad, s, w, wo);
                        let mut acc = T::zero();
                        if s == 1 {
                            let src = &x_row[lo + kx - pad..hi + kx - pad];
                            for (&g, &xv) in g_row[lo..hi].iter().zip(src) {
                                acc = acc + g * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                acc = acc + g_row[ox] * x_row[ox * s + kx - pad];
                            }
                        }
                        grads[c.weight + w_base + kx] = grads[c.weight + w_base + kx] + acc;
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = params[c.weight + w_base + kx];
                            let gx_row = &mut gx[row_start..row_start + w];
                            if s == 1 {
                                let dst = &mut gx_row[lo + kx - pad..hi + kx - pad];
                                for (d, &g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *d = *d + wv * g;
                                }
                            } else {
                                for ox in lo..hi {
                                    let d = &mut gx_row[ox * s + kx - pad];
                                    *d = *d + wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        grads[c.bias + co] = grads[c.bias + co] + bias_grad;
    }
}

pub(crate) fn forward<T: Float>(layout: &Layout, params: &[T], input: &Prepared<T>) -> Result<Trace<T>> {
    let mut maps: Vec<(Vec<T>, usize, usize)> = Vec::with_capacity(layout.convs.len());
    for (i, c) in layout.convs.iter().enumerate() {
        let (x, h, w) = match maps.last() {
            Some((m, h, w)) => (m.as_slice(), *h, *w),
            None => (input.data.as_slice(), input.height, input.width),
        };
        let (ho, wo) = (out_size(h, c.stride), out_size(w, c.stride));
        let mut y = vec![T::zero(); c.out_ch * ho * wo];
        conv_forward(x, h, w, params, c, &mut y, ho, wo);
        let mut finite = true;
        for v in y.iter_mut() {
            finite &= v.is_finite();
            *v = v.max(T::zero());
        }
        if !finite {
            return Err(Error::Numerical { layer: i });
        }
        maps.push((y, ho, wo));
    }

    let channels = layout.final_channels();
    let (last, hf, wf) = match maps.last() {
        Some((m, h, w)) => (m.as_slice(), *h, *w),
        None => (input.data.as_slice(), input.height, input.width),
    };
    let area = hf * wf;
    debug_assert_eq!(input.pooled_mask.len(), area);
    let count = input.pooled_mask.iter().filter(|&&m| m).count().max(1);
    let inv = T::one() / T::from(count).unwrap();
    let pooled: Vec<T> = (0..channels)
        .map(|ch| {
            let mut acc = T::zero();
            for (&v, &m) in last[ch * area..(ch + 1) * area].iter().zip(&input.pooled_mask) {
                if m {
                    acc = acc + v;
                }
            }
            acc * inv
        })
        .collect();
    let mut output = params[layout.head_bias];
    for (ch, &p) in pooled.iter().enumerate() {
        output = output + params[layout.head_weight + ch] * p;
    }
    if !output.is_finite() {
        return Err(Error::Numerical { layer: layout.convs.len() });
    }
    Ok(Trace { maps, pooled, output })
}

/// Gradient of `(output − target)²` w.r.t. every parameter, scaled by
/// `weight`, added into `grads`. Returns the unscaled squared error.
pub(crate) fn backward<T: Float>(
    layout: &Layout,
    params: &[T],
    input: &Prepared<T>,
    trace: &Trace<T>,
    target: T,
    weight: T,
    grads: &mut [T],
) -> T {
    let err = trace.output - target;
    let d_out = (err + err) * weight;

    grads[layout.head_bias] = grads[layout.head_bias] + d_out;
    for (ch, &p) in trace.pooled.iter().enumerate() {
        grads[layout.head_weight + ch] = grads[layout.head_weight + ch] + d_out * p;
    }
    let Some((_, hf, wf)) = trace.maps.last() else {
        return err * err;
    };
    let area = hf * wf;
    let count = input.pooled_mask.iter().filter(|&&m| m).count().max(1);
    let inv = T::one() / T::from(count).unwrap();
    let channels = layout.final_channels();
    let mut g = vec![T::zero(); channels * area];
    for ch in 0..channels {
        let d_pool = d_out * params[layout.head_weight + ch] * inv;
        for (gv, &m) in g[ch * area..(ch + 1) * area].iter_mut().zip(&input.pooled_mask) {
            if m {
                *gv = d_pool;
            }
        }
    }

    for i in (0..layout.convs.len()).rev() {
        let c = &layout.convs[i];
        let (y, ho, wo) = &trace.maps[i];
        // rectifier: pass gradient only where the activation is positive
        for (gv, &a) in g.iter_mut().zip(y) {
            if a <= T::zero() {
                *gv = T::zero();
            }
        }
        let (x, h, w) = if i == 0 {
            (input.data.as_slice(), input.height, input.width)
        } else {
            let (m, h, w) = &trace.maps[i - 1];
            (m.as_slice(), *h, *w)
        };
        if i == 0 {
            conv_backward(x, h, w, params, c, &g, *ho, *wo, grads, None);
        } else {
            let mut gx = vec![T::zero(); c.in_ch * h * w];
            conv_backward(x, h, w, params, c, &g, *ho, *wo, grads, Some(&mut gx));
            g = gx;
        }
    }
    err * err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::ConvSpec;

    fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize, k: usize, s: usize) -> Vec<f64> {
        let p = k as isize / 2;
        let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
        let mut y = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((co * cin + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loop() {
        let (cin, cout, h, w) = (2, 3, 7, 9);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        for (k, s) in [(3, 1), (5, 1), (3, 2), (3, 4), (5, 2)] {
            let n_w = cout * cin * k * k;
            let params: Vec<f64> = (0..n_w + cout).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
            let c = ConvLayout { weight: 0, bias: n_w, kernel: k, stride: s, in_ch: cin, out_ch: cout };
            let (ho, wo) = (out_size(h, s), out_size(w, s));
            let mut y = vec![0.0; cout * ho * wo];
            conv_forward(&x, h, w, &params, &c, &mut y, ho, wo);
            let expect = naive_conv(&x, cin, h, w, &params[..n_w], &params[n_w..], cout, k, s);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s}");
            }
        }
    }

    #[test]
    fn tap_range_covers_valid_columns() {
        for (k, s, n) in [(3, 1, 5), (5, 2, 9), (3, 4, 16), (5, 4, 7)] {
            let pad = k / 2;
            let out = out_size(n, s);
            for kx in 0..k {
                let (lo, hi) = tap_range(kx, pad, s, n, out);
                for ox in 0..out {
                    let ix = (ox * s + kx) as isize - pad as isize;
                    let valid = ix >= 0 && (ix as usize) < n;
                    assert_eq!(valid, (lo..hi).contains(&ox), "k{k} s{s} n{n} kx{kx} ox{ox}");
                }
            }
        }
    }

    #[test]
    fn layout_counts_parameters() {
        let arch = Architecture {
            stages: vec![
                vec![ConvSpec { kernel: 3, stride: 1, out_channels: 4 }],
                vec![ConvSpec { kernel: 5, stride: 2, out_channels: 6 }],
            ],
        };
        let l = Layout::new(&arch);
        assert_eq!(l.convs[1].weight, 2 * 4 * 9 + 4);
        assert_eq!(l.total, (2 * 4 * 9 + 4) + (4 * 6 * 25 + 6) + 6 + 1);
    }
}

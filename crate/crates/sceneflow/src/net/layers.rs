//! Layer primitives on NCHW batches, each with an explicit backward pass.
//!
//! Convolutions are direct (no im2col): a scalar weight times a shifted
//! input row accumulates into an output row, which keeps inner loops
//! contiguous and lets the compiler vectorize them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Batch;

/// Output spatial size of a conv with the given geometry.
#[inline]
pub fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - k) / stride + 1
}

/// ox range such that 0 <= ox*stride + kk - pad < in_size.
#[inline]
fn valid_range(out_size: usize, in_size: usize, k_off: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    if in_size + pad <= k_off {
        return None;
    }
    let hi = ((in_size - 1 + pad - k_off) / stride).min(out_size - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

pub fn conv2d_forward(
    input: &Batch,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Batch {
    let (n, cin, h_in, w_in) = (input.n, input.channels, input.height, input.width);
    assert_eq!(weight.len(), cout * cin * k * k, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let h_out = conv_out_size(h_in, k, stride, pad);
    let w_out = conv_out_size(w_in, k, stride, pad);
    let mut out = Batch::zeros(n, cout, h_out, w_out);
    let in_plane = h_in * w_in;
    let out_plane = h_out * w_out;

    for ni in 0..n {
        let in_sample = &input.data[ni * cin * in_plane..(ni + 1) * cin * in_plane];
        let out_sample = &mut out.data[ni * cout * out_plane..(ni + 1) * cout * out_plane];
        for co in 0..cout {
            let out_ch = &mut out_sample[co * out_plane..(co + 1) * out_plane];
            out_ch.fill(bias[co]);
            for ci in 0..cin {
                let in_ch = &in_sample[ci * in_plane..(ci + 1) * in_plane];
                let w_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    let Some((oy_lo, oy_hi)) = valid_range(h_out, h_in, ky, stride, pad) else {
                        continue;
                    };
                    for kx in 0..k {
                        let w = weight[w_base + ky * k + kx];
                        let Some((ox_lo, ox_hi)) = valid_range(w_out, w_in, kx, stride, pad)
                        else {
                            continue;
                        };
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_ch[iy * w_in..iy * w_in + w_in];
                            let out_row = &mut out_ch[oy * w_out..oy * w_out + w_out];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo + 1;
                                let src = &in_row[ix0..ix0 + len];
                                let dst = &mut out_row[ox_lo..ox_lo + len];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            } else {
                                let seg = &mut out_row[ox_lo..=ox_hi];
                                let base = ox_lo * stride + kx - pad;
                                for (i, slot) in seg.iter_mut().enumerate() {
                                    *slot += w * in_row[base + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn conv2d_backward(
    input: &Batch,
    weight: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grad_out: &Batch,
) -> (Batch, Vec<f64>, Vec<f64>) {
    let (n, cin, h_in, w_in) = (input.n, input.channels, input.height, input.width);
    let (h_out, w_out) = (grad_out.height, grad_out.width);
    let mut grad_in = Batch::zeros(n, cin, h_in, w_in);
    let mut grad_w = vec![0.0f64; weight.len()];
    let mut grad_b = vec![0.0f64; cout];
    let in_plane = h_in * w_in;
    let out_plane = h_out * w_out;

    for ni in 0..n {
        let in_sample = &input.data[ni * cin * in_plane..(ni + 1) * cin * in_plane];
        let gout_sample = &grad_out.data[ni * cout * out_plane..(ni + 1) * cout * out_plane];
        let gin_sample = &mut grad_in.data[ni * cin * in_plane..(ni + 1) * cin * in_plane];
        for co in 0..cout {
            let gout_ch = &gout_sample[co * out_plane..(co + 1) * out_plane];
            grad_b[co] += gout_ch.iter().sum::<f64>();
            for ci in 0..cin {
                let in_ch = &in_sample[ci * in_plane..(ci + 1) * in_plane];
                let gin_ch = &mut gin_sample[ci * in_plane..(ci + 1) * in_plane];
                let w_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    let Some((oy_lo, oy_hi)) = valid_range(h_out, h_in, ky, stride, pad) else {
                        continue;
                    };
                    for kx in 0..k {
                        let w = weight[w_base + ky * k + kx];
                        let Some((ox_lo, ox_hi)) = valid_range(w_out, w_in, kx, stride, pad)
                        else {
                            continue;
                        };
                        let mut w_acc = 0.0f64;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_ch[iy * w_in..iy * w_in + w_in];
                            let gin_row = &mut gin_ch[iy * w_in..iy * w_in + w_in];
                            let g_row = &gout_ch[oy * w_out..oy * w_out + w_out];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo + 1;
                                let src = &in_row[ix0..ix0 + len];
                                let g = &g_row[ox_lo..ox_lo + len];
                                let dst = &mut gin_row[ix0..ix0 + len];
                                for i in 0..len {
                                    w_acc += g[i] * src[i];
                                    dst[i] += w * g[i];
                                }
                            } else {
                                for (ox, &g) in g_row
                                    .iter()
                                    .enumerate()
                                    .take(ox_hi + 1)
                                    .skip(ox_lo)
                                {
                                    let ix = ox * stride + kx - pad;
                                    w_acc += g * in_row[ix];
                                    gin_row[ix] += w * g;
                                }
                            }
                        }
                        grad_w[w_base + ky * k + kx] += w_acc;
                    }
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Per-channel batch statistics cached for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Batch,
}

pub const BN_EPS: f64 = 1e-5;

/// Training-mode batch norm over (N, H, W) per channel. Running-stat
/// updates are the caller's responsibility (the cache carries mean/var).
pub fn batchnorm_forward_train(input: &Batch, gamma: &[f64], beta: &[f64]) -> (Batch, BnCache) {
    let c = input.channels;
    let plane = input.height * input.width;
    let count = input.n * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..input.n {
            let base = (ni * c + ci) * plane;
            sum += input.data[base..base + plane].iter().sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for ni in 0..input.n {
            let base = (ni * c + ci) * plane;
            for &v in &input.data[base..base + plane] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Batch::zeros(input.n, c, input.height, input.width);
    let mut out = Batch::zeros(input.n, c, input.height, input.width);
    for ni in 0..input.n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (m, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in base..base + plane {
                let xh = (input.data[i] - m) * is;
                xhat.data[i] = xh;
                out.data[i] = g * xh + b;
            }
        }
    }
    (
        out,
        BnCache {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_forward_eval(
    input: &Batch,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Batch {
    let c = input.channels;
    let plane = input.height * input.width;
    let mut out = input.clone();
    for ni in 0..input.n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let is = 1.0 / (running_var[ci] + BN_EPS).sqrt();
            let (m, g, b) = (running_mean[ci], gamma[ci], beta[ci]);
            for v in &mut out.data[base..base + plane] {
                *v = g * (*v - m) * is + b;
            }
        }
    }
    out
}

/// Returns (grad_input, grad_gamma, grad_beta) for training-mode BN.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &[f64],
    grad_out: &Batch,
) -> (Batch, Vec<f64>, Vec<f64>) {
    let c = grad_out.channels;
    let plane = grad_out.height * grad_out.width;
    let count = (grad_out.n * plane) as f64;
    let mut grad_gamma = vec![0.0f64; c];
    let mut grad_beta = vec![0.0f64; c];
    // Per-channel sums of dy and dy*xhat.
    for ni in 0..grad_out.n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut s = 0.0;
            let mut sx = 0.0;
            for i in base..base + plane {
                s += grad_out.data[i];
                sx += grad_out.data[i] * cache.xhat.data[i];
            }
            grad_beta[ci] += s;
            grad_gamma[ci] += sx;
        }
    }
    let mut grad_in = Batch::zeros(grad_out.n, c, grad_out.height, grad_out.width);
    for ni in 0..grad_out.n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let coeff = gamma[ci] * cache.inv_std[ci];
            let (sum_dy, sum_dy_xhat) = (grad_beta[ci], grad_gamma[ci]);
            for i in base..base + plane {
                grad_in.data[i] = coeff
                    * (grad_out.data[i]
                        - sum_dy / count
                        - cache.xhat.data[i] * sum_dy_xhat / count);
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

pub fn leaky_relu_forward(input: &Batch, slope: f64) -> Batch {
    let mut out = input.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Backward through leaky ReLU given the cached pre-activation.
pub fn leaky_relu_backward(pre_activation: &Batch, slope: f64, grad_out: &Batch) -> Batch {
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data.iter_mut().zip(&pre_activation.data) {
        if x < 0.0 {
            *g *= slope;
        }
    }
    grad_in
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(input: &Batch) -> Batch {
    let (n, c, h, w) = (input.n, input.channels, input.height, input.width);
    let mut out = Batch::zeros(n, c, h * 2, w * 2);
    let in_plane = h * w;
    let out_plane = 4 * in_plane;
    for nc in 0..n * c {
        let src = &input.data[nc * in_plane..(nc + 1) * in_plane];
        let dst = &mut out.data[nc * out_plane..(nc + 1) * out_plane];
        for y in 0..2 * h {
            let src_row = &src[(y / 2) * w..(y / 2) * w + w];
            let dst_row = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for x in 0..2 * w {
                dst_row[x] = src_row[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Batch) -> Batch {
    let (n, c, h2, w2) = (grad_out.n, grad_out.channels, grad_out.height, grad_out.width);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad_in = Batch::zeros(n, c, h, w);
    let in_plane = h * w;
    let out_plane = h2 * w2;
    for nc in 0..n * c {
        let src = &grad_out.data[nc * out_plane..(nc + 1) * out_plane];
        let dst = &mut grad_in.data[nc * in_plane..(nc + 1) * in_plane];
        for y in 0..h2 {
            let dst_row = &mut dst[(y / 2) * w..(y / 2) * w + w];
            let src_row = &src[y * w2..(y + 1) * w2];
            for x in 0..w2 {
                dst_row[x / 2] += src_row[x];
            }
        }
    }
    grad_in
}

/// Concatenates two batches along the channel axis.
pub fn concat_channels(a: &Batch, b: &Batch) -> Batch {
    assert_eq!((a.n, a.height, a.width), (b.n, b.height, b.width));
    let plane = a.height * a.width;
    let mut out = Batch::zeros(a.n, a.channels + b.channels, a.height, a.width);
    for ni in 0..a.n {
        let dst = out.sample_mut(ni);
        dst[..a.channels * plane].copy_from_slice(a.sample(ni));
        dst[a.channels * plane..].copy_from_slice(b.sample(ni));
    }
    out
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(grad: &Batch, c_a: usize) -> (Batch, Batch) {
    let c_b = grad.channels - c_a;
    let plane = grad.height * grad.width;
    let mut a = Batch::zeros(grad.n, c_a, grad.height, grad.width);
    let mut b = Batch::zeros(grad.n, c_b, grad.height, grad.width);
    for ni in 0..grad.n {
        let src = grad.sample(ni);
        a.sample_mut(ni).copy_from_slice(&src[..c_a * plane]);
        b.sample_mut(ni).copy_from_slice(&src[c_a * plane..]);
    }
    (a, b)
}

/// Elementwise add (used by additive skip connections).
pub fn add_into(acc: &mut Batch, other: &Batch) {
    assert_eq!(acc.data.len(), other.data.len());
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

/// Dense layer: rows of `input` (n, features) -> (n, out_features).
/// Weight layout is [out][in].
pub fn dense_forward(input: &[f64], n: usize, w: &[f64], b: &[f64], out_f: usize) -> Vec<f64> {
    let in_f = input.len() / n;
    assert_eq!(w.len(), out_f * in_f, "dense weight shape");
    let mut out = vec![0.0f64; n * out_f];
    for ni in 0..n {
        let x = &input[ni * in_f..(ni + 1) * in_f];
        for j in 0..out_f {
            let row = &w[j * in_f..(j + 1) * in_f];
            let mut acc = b[j];
            for i in 0..in_f {
                acc += row[i] * x[i];
            }
            out[ni * out_f + j] = acc;
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn dense_backward(
    input: &[f64],
    n: usize,
    w: &[f64],
    out_f: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_f = input.len() / n;
    let mut grad_in = vec![0.0f64; n * in_f];
    let mut grad_w = vec![0.0f64; w.len()];
    let mut grad_b = vec![0.0f64; out_f];
    for ni in 0..n {
        let x = &input[ni * in_f..(ni + 1) * in_f];
        let gx = &mut grad_in[ni * in_f..(ni + 1) * in_f];
        for j in 0..out_f {
            let g = grad_out[ni * out_f + j];
            grad_b[j] += g;
            let row = &w[j * in_f..(j + 1) * in_f];
            let grow = &mut grad_w[j * in_f..(j + 1) * in_f];
            for i in 0..in_f {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Inverted dropout with a seeded mask so a forward pass can be replayed
/// exactly. Returns (output, mask).
pub fn dropout_forward(input: &[f64], rate: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
    let keep = 1.0 - rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| {
            if rng.random_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let out = input.iter().zip(&mask).map(|(x, m)| x * m).collect();
    (out, mask)
}

pub fn dropout_backward(mask: &[f64], grad_out: &[f64]) -> Vec<f64> {
    grad_out.iter().zip(mask).map(|(g, m)| g * m).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

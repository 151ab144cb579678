//! Reference implementations for the oracle tests: plain loops over flat
//! row-major buffers, written without the tape or any library helper.
#![allow(
    dead_code,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod identity_checks;
pub mod oracle_checks;

use pyrstyle::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0AC1E)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Max absolute difference over the largest reference magnitude.
pub fn rel_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn scalar_rel_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// Mirror without repeating the edge: -1 -> 1, n -> n - 2.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// `size × size × 3` window with top-left at `center - size/2`.
pub fn window(img: &[f64], h: usize, w: usize, center: (usize, usize), size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let y = reflect(center.0 as isize - half + r as isize, h);
            let x = reflect(center.1 as isize - half + c as isize, w);
            for ch in 0..3 {
                out.push(img[(y * w + x) * 3 + ch]);
            }
        }
    }
    out
}

/// Feature map in HWC layout.
#[derive(Clone, Debug)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

/// Zero-padded cross-correlation, kernel `[k, k, cin, cout]`, padding `k/2`,
/// output `ceil(h/stride) × ceil(w/stride)`.
pub fn conv(x: &Map, kernel: &[f64], k: usize, cout: usize, stride: usize) -> Map {
    let ho = x.h.div_ceil(stride);
    let wo = x.w.div_ceil(stride);
    let pad = (k / 2) as isize;
    let mut data = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                            continue;
                        }
                        for ci in 0..x.c {
                            let xv = x.data[((iy as usize) * x.w + ix as usize) * x.c + ci];
                            let kv = kernel[((ky * k + kx) * x.c + ci) * cout + co];
                            acc += xv * kv;
                        }
                    }
                }
                data[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    Map {
        h: ho,
        w: wo,
        c: cout,
        data,
    }
}

pub fn bias_relu(m: &mut Map, bias: &[f64]) {
    for (i, v) in m.data.iter_mut().enumerate() {
        *v = (*v + bias[i % m.c]).max(0.0);
    }
}

/// Two-pass per-channel mean and `sqrt(var + eps)`.
pub fn channel_stats(m: &Map, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = (m.h * m.w) as f64;
    let mut mean = vec![0.0; m.c];
    for p in 0..m.h * m.w {
        for c in 0..m.c {
            mean[c] += m.data[p * m.c + c];
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let mut var = vec![0.0; m.c];
    for p in 0..m.h * m.w {
        for c in 0..m.c {
            let d = m.data[p * m.c + c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n + eps).sqrt()).collect();
    (mean, std)
}

pub fn channel_mean(m: &Map) -> Vec<f64> {
    channel_stats(m, 0.0).0
}

/// `[n, m] · [m, p]`.
pub fn matmul(a: &[f64], n: usize, m: usize, b: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..m {
                acc += a[i * m + t] * b[t * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - m).exp() / z;
        }
    }
    out
}

pub fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) / (var + eps).sqrt() * gain[j] + bias[j];
        }
    }
    out
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-head attention of projected `q [lq, d]`, `k, v [lk, d]`, heads
/// concatenated and multiplied by `wo`. Also returns each head's weights.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    wo: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let mut cat = vec![0.0; lq * d];
    let mut all = Vec::new();
    for h in 0..heads {
        let mut logits = vec![0.0; lq * lk];
        for i in 0..lq {
            for j in 0..lk {
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q[i * d + h * dh + t] * k[j * d + h * dh + t];
                }
                logits[i * lk + j] = dot / (dh as f64).sqrt();
            }
        }
        let wts = softmax_rows(&logits, lq, lk);
        for i in 0..lq {
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += wts[i * lk + j] * v[j * d + h * dh + t];
                }
                cat[i * d + h * dh + t] = acc;
            }
        }
        all.push(wts);
    }
    (matmul(&cat, lq, d, wo, d), all)
}

pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

pub fn mha(
    xq: &[f64],
    xkv: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    w: &AttnWeights,
) -> Vec<f64> {
    let q = matmul(xq, lq, d, w.wq, d);
    let k = matmul(xkv, lk, d, w.wk, d);
    let v = matmul(xkv, lk, d, w.wv, d);
    attention(&q, &k, &v, lq, lk, d, heads, w.wo).0
}

pub struct FfnWeights<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub hidden: usize,
}

pub fn ffn(x: &[f64], l: usize, d: usize, w: &FfnWeights) -> Vec<f64> {
    let mut h = matmul(x, l, d, w.w1, w.hidden);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + w.b1[i % w.hidden]).max(0.0);
    }
    let mut y = matmul(&h, l, w.hidden, w.w2, d);
    for (i, v) in y.iter_mut().enumerate() {
        *v += w.b2[i % d];
    }
    y
}

/// Stride-2 conv + bias + relu stack; returns every layer's map.
pub fn features(img: &Map, layers: &[(Vec<f64>, Vec<f64>, usize)]) -> Vec<Map> {
    let mut x = img.clone();
    let mut out = Vec::new();
    for (kernel, bias, k) in layers {
        let mut y = conv(&x, kernel, *k, bias.len(), 2);
        bias_relu(&mut y, bias);
        out.push(y.clone());
        x = y;
    }
    out
}

/// Layer-averaged MSE between feature stacks.
pub fn feature_distance(a: &[Map], b: &[Map]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| mse(&x.data, &y.data))
        .sum::<f64>()
        / a.len() as f64
}

/// Layer-averaged MSE of channel means plus MSE of channel stds.
pub fn statistics_distance(a: &[Map], b: &[Map], eps: f64) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (mx, sx) = channel_stats(x, eps);
        let (my, sy) = channel_stats(y, eps);
        total += mse(&mx, &my) + mse(&sx, &sy);
    }
    total / a.len() as f64
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

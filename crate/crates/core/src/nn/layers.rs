//! Forward and backward kernels for the layer types used by the models.
//!
//! All kernels work on row-major `f64` buffers. Convolutions go through
//! im2col and a small set of GEMM loops.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// Geometry of a stride-1 square-kernel convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_size(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_size(&self) -> usize {
        self.out_channels * self.out_area()
    }

    fn im2col(&self, input: &[f64], col: &mut [f64]) {
        let (oh, ow, k, p) = (self.out_height(), self.out_width(), self.kernel, self.padding);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p as isize;
                        for ox in 0..ow {
                            let ix = ox as isize + kx as isize - p as isize;
                            dst[oy * ow + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                input[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], grad_in: &mut [f64]) {
        let (oh, ow, k, p) = (self.out_height(), self.out_width(), self.kernel, self.padding);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize + kx as isize - p as isize;
                            if ix >= 0 && ix < w {
                                grad_in[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                    src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `input` is `batch × C × H × W`, `weight` is `O × C × k × k`.
pub fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (patch, area) = (g.patch(), g.out_area());
    let mut out = vec![0.0; batch * g.out_size()];
    let mut col = vec![0.0; patch * area];
    for n in 0..batch {
        g.im2col(&input[n * g.in_size()..(n + 1) * g.in_size()], &mut col);
        let dst = &mut out[n * g.out_size()..(n + 1) * g.out_size()];
        for (o, chunk) in dst.chunks_mut(area).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(weight, &col, dst, g.out_channels, patch, area);
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (patch, area) = (g.patch(), g.out_area());
    let mut grad_in = vec![0.0; batch * g.in_size()];
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.out_channels];
    let mut col = vec![0.0; patch * area];
    let mut grad_col = vec![0.0; patch * area];
    for n in 0..batch {
        let dout = &grad_out[n * g.out_size()..(n + 1) * g.out_size()];
        g.im2col(&input[n * g.in_size()..(n + 1) * g.in_size()], &mut col);
        gemm_bt(dout, &col, &mut grad_w, g.out_channels, area, patch);
        for (o, chunk) in dout.chunks(area).enumerate() {
            grad_b[o] += chunk.iter().sum::<f64>();
        }
        grad_col.fill(0.0);
        gemm_at(weight, dout, &mut grad_col, patch, g.out_channels, area);
        g.col2im(&grad_col, &mut grad_in[n * g.in_size()..(n + 1) * g.in_size()]);
    }
    (grad_in, grad_w, grad_b)
}

/// `y = x · Wᵀ + b` with `x: batch × in`, `W: out × in`.
pub fn linear_forward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * out_features);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm_bt(input, weight, &mut out, batch, in_features, out_features);
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut grad_in = vec![0.0; batch * in_features];
    gemm(grad_out, weight, &mut grad_in, batch, out_features, in_features);
    let mut grad_w = vec![0.0; out_features * in_features];
    gemm_at(grad_out, input, &mut grad_w, out_features, batch, in_features);
    let mut grad_b = vec![0.0; out_features];
    for row in grad_out.chunks(out_features) {
        for (g, d) in grad_b.iter_mut().zip(row) {
            *g += d;
        }
    }
    (grad_in, grad_w, grad_b)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    /// Elements per channel, `batch × spatial`.
    pub count: usize,
}

/// Batch norm over a `batch × channels × spatial` buffer using batch statistics.
pub fn batchnorm_forward_train(
    batch: usize,
    channels: usize,
    spatial: usize,
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, BatchNormCache) {
    let count = batch * spatial;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            mean[c] += input[base..base + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            var[c] += input[base..base + spatial]
                .iter()
                .map(|x| (x - mean[c]) * (x - mean[c]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                let xh = (input[i] - mean[c]) * inv_std[c];
                normalized[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

/// Batch norm using running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_eval(
    batch: usize,
    channels: usize,
    spatial: usize,
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for n in 0..batch {
        for c in 0..channels {
            let scale = gamma[c] / (running_var[c] + BN_EPS).sqrt();
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                out[i] = (input[i] - running_mean[c]) * scale + beta[c];
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    batch: usize,
    channels: usize,
    spatial: usize,
    cache: &BatchNormCache,
    gamma: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut grad_gamma = vec![0.0; channels];
    let mut grad_beta = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                grad_gamma[c] += grad_out[i] * cache.normalized[i];
                grad_beta[c] += grad_out[i];
            }
        }
    }
    let m = cache.count as f64;
    let mut grad_in = vec![0.0; grad_out.len()];
    for n in 0..batch {
        for c in 0..channels {
            // d xhat = dy * gamma; sums over the channel are gamma * grad_beta
            // and gamma * grad_gamma.
            let k = gamma[c] * cache.inv_std[c] / m;
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                grad_in[i] =
                    k * (m * grad_out[i] - grad_beta[c] - cache.normalized[i] * grad_gamma[c]);
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

pub fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| x.max(0.0)).collect()
}

pub fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2×2 stride-2 max pooling over `planes` planes of `height × width`.
/// Returns the pooled values and the flat input index of each maximum.
pub fn maxpool2_forward(
    planes: usize,
    height: usize,
    width: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        grad_in[i] += g;
    }
    grad_in
}

/// Row-wise softmax of `batch × classes` logits.
pub fn softmax(classes: usize, logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Mean cross-entropy of softmax probabilities against integer labels.
/// Returns `(loss, grad_logits)`.
pub fn softmax_cross_entropy(classes: usize, probs: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut loss = 0.0;
    let mut grad = probs.to_vec();
    for (n, &y) in labels.iter().enumerate() {
        let y = usize::from(y);
        loss -= probs[n * classes + y].max(f64::MIN_POSITIVE).ln();
        grad[n * classes + y] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= batch as f64);
    (loss / batch as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| f64::from(x) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(&a, &b, &mut c, 2, 3, 4);
        // transpose b to 4x3 and use gemm_bt
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_bt(&a, &bt, &mut c2, 2, 3, 4);
        // transpose a to 3x2 and use gemm_at
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_at(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            height: 3,
            width: 3,
            kernel: 3,
            padding: 1,
        };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let y = conv2d_forward(&g, 1, &x, &w, &[0.5]);
        let expect: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert_eq!(y, expect);
    }

    #[test]
    fn maxpool_picks_block_maximum() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (y, idx) = maxpool2_forward(1, 2, 4, &x);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(3, &[1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
